use std::path::PathBuf;

use fmd_nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum FmError {
    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("morph search for code {code} accepted {accepted} of {wanted} candidates")]
    MorphSearch { code: usize, accepted: usize, wanted: usize },
    #[error("{stage} diverged (last finite loss {last_finite:?})")]
    Training { stage: &'static str, last_finite: Option<f64> },
    #[error("invalid state: {0}")]
    State(String),
    #[error("cannot ingest {}: {reason}", file.display())]
    Ingest { file: PathBuf, reason: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    /// A pipeline stage failed; artifacts of earlier stages are kept.
    #[error("stage {stage}: {source}")]
    Stage { stage: &'static str, source: Box<FmError> },
}

impl FmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FmError::Io { path: path.into(), source }
    }

    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            FmError::Contract(_) | FmError::Config(_) | FmError::State(_) => 2,
            FmError::Numeric(_) | FmError::Training { .. } => 3,
            FmError::Calibration(_) | FmError::MorphSearch { .. } => 4,
            FmError::Ingest { .. } | FmError::Io { .. } => 5,
            FmError::Nn(NnError::Io(_)) | FmError::Nn(NnError::Format(_)) => 5,
            FmError::Nn(_) => 2,
            FmError::Stage { source, .. } => source.exit_code(),
        }
    }
}

pub type Result<T, E = FmError> = std::result::Result<T, E>;
