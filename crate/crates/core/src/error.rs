use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("input out of domain: {0}")]
    InputDomain(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("end of stream at step {0}")]
    EndOfStream(usize),

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_step(step: usize, source: Error) -> Self {
        Error::AtStep {
            step,
            source: Box::new(source),
        }
    }
}
