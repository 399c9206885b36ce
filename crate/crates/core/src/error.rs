use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A domain value failed its construction invariants.
    #[error("validation error in `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("simulation error at path {path}, knot {knot}: {message}")]
    Simulation {
        path: usize,
        knot: usize,
        message: String,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("regression design is ill-conditioned at knot {knot} (condition number {condition:.3e}, rank deficit {deficit})")]
    Conditioning {
        knot: usize,
        condition: f64,
        deficit: usize,
    },

    #[error("scheme error: {0}")]
    Scheme(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command line front-end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation { .. } | Error::Argument(_) | Error::Config(_) => 2,
            Error::Io(_) | Error::Serde(_) => 4,
            _ => 3,
        }
    }
}
