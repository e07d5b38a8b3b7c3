use agentsynth::error::{CurateError, RetrievalError, StoreError, SynthError};
use agentsynth::runtime::FailureKind;
use agentsynth::{EnvError, GatewayError};
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PROVIDER: i32 = 3;
pub const EXIT_PARSE_ABORT: i32 = 4;
/// `run` reached its step limit without a stop action.
pub const EXIT_MAX_STEPS: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("provider: {0}")]
    Provider(String),
    #[error("unparseable model output: {0}")]
    ParseAbort(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Store(_) => EXIT_CONFIG,
            Self::Provider(_) => EXIT_PROVIDER,
            Self::ParseAbort(_) => EXIT_PARSE_ABORT,
            Self::Failed(_) => EXIT_FAILURE,
        }
    }

    pub fn from_failure(kind: FailureKind, message: String) -> Self {
        match kind {
            FailureKind::Parse => Self::ParseAbort(message),
            FailureKind::Provider => Self::Provider(message),
            FailureKind::Config | FailureKind::Budget => Self::Config(message),
            FailureKind::Environment => Self::Failed(message),
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Transport { .. } => Self::Provider(e.to_string()),
            GatewayError::Parse(_) => Self::ParseAbort(e.to_string()),
            _ => Self::Config(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Gateway(g) => g.into(),
            SynthError::Rollout { kind, .. } => Self::from_failure(kind, e.to_string()),
            SynthError::NoDocuments | SynthError::Config(_) => Self::Config(e.to_string()),
        }
    }
}

impl From<CurateError> for CliError {
    fn from(e: CurateError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Provider(g) => g.into(),
            RetrievalError::EmbedderMismatch { .. } | RetrievalError::FormatVersion(_) => {
                Self::Config(e.to_string())
            }
            _ => Self::Failed(e.to_string()),
        }
    }
}

impl From<EnvError> for CliError {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::UnknownWorld(_) | EnvError::InvalidWorld(_) | EnvError::Load(_) => {
                Self::Config(e.to_string())
            }
            _ => Self::Failed(e.to_string()),
        }
    }
}
