use thiserror::Error;

use crate::pipeline::dump::DumpError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model or experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data violates an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A statistic is undefined for the given sample (zero variance, too few points).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Dump(#[from] DumpError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// An internal consistency check failed.
    #[error("invariant violated: {0}")]
    Invariant(String),

    /// Error raised inside a named pipeline stage.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for the command-line surface:
    /// 2 for configuration errors, 3 for data errors, 4 for invariant violations.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::InvalidInput(_) | Error::Degenerate(_) | Error::Dump(_) | Error::Io(_) => 3,
            Error::Invariant(_) => 4,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }

    /// Innermost error, unwrapping stage attribution.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
