use thiserror::Error;

/// Errors raised across the simulator. Variants map onto the CLI exit codes
/// (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("inconsistent input: {0}")]
    Consistency(String),

    #[error("numeric failure{context}: {message}")]
    Numeric { message: String, context: String },

    #[error("undefined value: {0}")]
    Undefined(String),

    #[error("ingestion error at row {row}: {message}")]
    Ingestion { row: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn numeric(message: impl Into<String>) -> Self {
        Error::Numeric {
            message: message.into(),
            context: String::new(),
        }
    }

    /// Attach `(round, step, client)` context to numeric failures; other
    /// variants pass through unchanged.
    pub fn in_round(self, round: usize, step: usize, client: usize) -> Self {
        match self {
            Error::Numeric { message, .. } => Error::Numeric {
                message,
                context: format!(" (round {round}, step {step}, client {client})"),
            },
            other => other,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter(_) | Error::Json(_) => 2,
            Error::Infeasible(_) => 3,
            _ => 1,
        }
    }
}
