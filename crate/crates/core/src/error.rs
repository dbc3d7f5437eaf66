use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("region error: {0}")]
    Region(String),

    #[error("ingestion error ({variable}): {msg}")]
    Ingestion { variable: String, msg: String },

    /// A non-finite value appeared while stepping the ODE system.
    #[error("integration error at step {step}: non-finite value in channel {channel} at (row {row}, col {col})")]
    Integration {
        step: usize,
        channel: usize,
        row: usize,
        col: usize,
    },

    #[error("model error: {0}")]
    Model(String),

    #[error("loss error: {0}")]
    Loss(String),

    #[error("undefined score: {0}")]
    UndefinedScore(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn ingestion(variable: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Ingestion {
            variable: variable.into(),
            msg: msg.into(),
        }
    }
}
