use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: {lhs} vs {rhs}")]
    Dimension {
        context: String,
        lhs: String,
        rhs: String,
    },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn dimension(context: impl Into<String>, lhs: impl ToString, rhs: impl ToString) -> Self {
        Error::Dimension {
            context: context.into(),
            lhs: lhs.to_string(),
            rhs: rhs.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
