use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("malformed trajectory: {0}")]
    Structure(String),
    #[error("span ({i}, {j}) is out of range for a trajectory with {n} actions")]
    Range { i: usize, j: usize, n: usize },
    #[error("invalid document: {0}")]
    InvalidDocument(String),
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("environment is finished; reset before executing")]
    Finished,
    #[error("stop actions are handled by the runtime, not executed")]
    StopNotExecutable,
    #[error("invalid world spec: {0}")]
    InvalidWorld(String),
    #[error("no world registered for domain tag {0:?}")]
    UnknownWorld(String),
    #[error("failed to load world spec: {0}")]
    Load(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("prompt must not be empty")]
    EmptyPrompt,
    #[error("provider configuration error: {0}")]
    Config(String),
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("could not parse model output: {0}")]
    Parse(String),
    #[error("template error: {0}")]
    Template(String),
}

impl GatewayError {
    pub fn is_transport(&self) -> bool {
        matches!(self, Self::Transport { .. })
    }
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot build an index over an empty corpus")]
    EmptyCorpus,
    #[error("text has no tokens to embed")]
    EmptyText,
    #[error("embedding dimension {got} does not match index dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("index was built with embedder {index:?} but queried with {query:?}")]
    EmbedderMismatch { index: String, query: String },
    #[error("unsupported index format version {0}")]
    FormatVersion(u32),
    #[error("embedding provider failed: {0}")]
    Provider(#[from] GatewayError),
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("prompt needs {needed} tokens without any examples but the budget is {budget}")]
    Budget { needed: usize, budget: usize },
    #[error("invalid runtime config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Error)]
pub enum CurateError {
    #[error("committee must have at least one member")]
    EmptyCommittee,
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no documents to synthesize from")]
    NoDocuments,
    #[error("invalid synthesis config: {0}")]
    Config(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("rollout {trajectory_id} failed: {message}")]
    Rollout {
        trajectory_id: String,
        kind: crate::runtime::FailureKind,
        message: String,
    },
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Line {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl StoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
