use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("validation error in `{table}` row {row}: {message}")]
    Validation {
        table: String,
        row: String,
        message: String,
    },

    #[error("inference collapse at frame {frame}: no state with non-zero probability")]
    InferenceCollapse { frame: usize },

    #[error("inference collapse in trace {trace} at frame {frame}")]
    TraceCollapse { trace: usize, frame: usize },

    #[error("no split: every sample has identical features")]
    NoSplit,

    #[error("boosting stall: best weighted error {0:.6} >= 0.5")]
    BoostingStall(f64),

    #[error("could not place building {index} after {attempts} attempts")]
    Placement { index: usize, attempts: usize },

    #[error("invalid activity script: {0}")]
    InvalidScript(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    /// True for errors a CLI should report as bad input rather than a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::Parse { .. }
                | Error::Validation { .. }
                | Error::Config(_)
                | Error::InvalidScript(_)
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::parse(format!("line {} column {}", e.line(), e.column()), e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let location = e
            .position()
            .map(|p| format!("line {}", p.line()))
            .unwrap_or_else(|| "unknown position".to_string());
        Error::parse(location, e.to_string())
    }
}
