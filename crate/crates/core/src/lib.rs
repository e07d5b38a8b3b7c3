//! Agent training data synthesis from documentation.
//!
//! The pipeline proposes task instructions from documents, rolls them out in
//! an environment, derives new instruction/trajectory examples from every
//! sub-trajectory of each rollout (backward construction), filters them, and
//! serves them back to an acting agent through per-step retrieval.

pub mod curator;
pub mod datastore;
pub mod env;
pub mod error;
pub mod gateway;
pub mod model;
pub mod prompts;
pub mod retrieval;
pub mod runtime;
pub mod synth;

pub use error::{
    CurateError, EnvError, GatewayError, ModelError, RetrievalError, RuntimeError, StoreError,
    SynthError,
};
pub use model::{
    action_count, enumerate_spans, estimate_tokens, Action, ActionKind, Document, EpisodeResult,
    Example, InstructionKind, Observation, Provenance, RetrievalHit, RetrievalSource, Termination,
    Trajectory, TrajectoryItem,
};
