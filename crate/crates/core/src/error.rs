use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("entity recognizer failed on window {window}: {message}")]
    Recognizer { window: usize, message: String },

    #[error("scorer returned non-finite score {score} for entity {entity:?}")]
    Scorer { entity: String, score: f64 },

    #[error("invalid frame: {0}")]
    InvalidFrame(String),

    #[error("rule parse error at column {column}: {message}")]
    RuleParse { column: usize, message: String },

    #[error("non-finite attention scores in layer {layer}, head {head}")]
    Numerical { layer: usize, head: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite loss in batch {batch}")]
    NonFiniteLoss { batch: usize },

    #[error("stage `{stage}` failed for sample {sample}: {source}")]
    Stage {
        stage: &'static str,
        sample: String,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn at_stage(self, stage: &'static str, sample: &str) -> Error {
        Error::Stage {
            stage,
            sample: sample.to_string(),
            source: Box::new(self),
        }
    }
}
