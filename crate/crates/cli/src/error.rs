use thiserror::Error;

/// Failures surfaced by the command-line driver, each with its exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// The configuration is malformed or violates a constraint.
    #[error("config error at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("missing tau source: {0}")]
    MissingTau(String),

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("nonpositive multiplier for '{name}': {value}")]
    NonPositiveMultiplier { name: String, value: f64 },

    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema { .. } => 2,
            CliError::MissingTau(_) => 3,
            CliError::Checkpoint(_) => 4,
            CliError::NonPositiveMultiplier { .. } => 5,
            CliError::Internal(_) => 1,
        }
    }
}

impl From<specdec_lab::Error> for CliError {
    fn from(e: specdec_lab::Error) -> Self {
        use specdec_lab::Error as E;
        match e {
            E::InvalidArgument(m) => CliError::schema("<arguments>", m),
            E::Checkpoint(m) => CliError::Checkpoint(m),
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
