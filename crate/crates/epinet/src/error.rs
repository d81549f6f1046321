use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {context}: {message}")]
    Dimension { context: String, message: String },

    #[error("config parse error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("shape chain violation between layers `{from}` and `{to}`: {message}")]
    ShapeChain {
        from: String,
        to: String,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("data format error in {path}: {message}")]
    DataFormat { path: String, message: String },

    #[error("gradient check error: {0}")]
    GradCheck(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Dimension {
            context: context.into(),
            message: message.into(),
        }
    }
}
