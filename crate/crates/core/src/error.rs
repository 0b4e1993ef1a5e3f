use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("non-finite value at decoder layer {layer}: {what}")]
    Numeric { layer: usize, what: String },

    #[error("divergence at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by reading or writing files rather than by
    /// invalid content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}
