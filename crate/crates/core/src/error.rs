use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("rank error: {0}")]
    Rank(String),

    #[error("generation failure: {0}")]
    Generation(String),

    #[error("invalid scheme: {0}")]
    InvalidScheme(String),

    #[error("numeric failure at step {step}: {what}")]
    Numeric { step: u64, what: String },

    #[error("controller domain error at step {step}: {what}")]
    Domain { step: u64, what: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("framing error: {0}")]
    Framing(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(what: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            what,
            expected,
            actual,
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension { .. } | Error::Format(_) | Error::Csv(_) => 2,
            Error::Rank(_)
            | Error::Generation(_)
            | Error::InvalidScheme(_)
            | Error::Numeric { .. }
            | Error::Domain { .. } => 3,
            Error::Protocol(_) | Error::Framing(_) | Error::Io(_) => 4,
        }
    }
}

pub(crate) fn ensure_dim(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::dim(what, expected, actual))
    }
}
