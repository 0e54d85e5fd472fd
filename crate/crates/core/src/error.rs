use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] segtrans_autograd::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("skip connection at level {level}: encoder map {enc:?} does not match decoder map {dec:?}")]
    SkipMismatch { level: usize, enc: Vec<usize>, dec: Vec<usize> },
    #[error("missing skip level {0}")]
    MissingSkip(usize),
    #[error("non-finite {what} at step {step}: {report}")]
    NonFinite { what: &'static str, step: u64, report: String },
    #[error("variant {variant} has no {what}")]
    Variant { variant: &'static str, what: &'static str },
}

pub type Result<T> = std::result::Result<T, Error>;
