use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared by all simulator modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("mapping error: {0}")]
    Mapping(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training error at step {step}: non-finite loss {loss}")]
    Training { step: usize, loss: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn mapping(msg: impl Into<String>) -> Self {
        Error::Mapping(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// CLI exit code: 2 for config errors, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 3,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
