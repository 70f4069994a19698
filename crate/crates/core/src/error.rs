use std::path::PathBuf;

/// Errors raised anywhere in the extraction pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("attention mask row {row} has no attendable position")]
    DegenerateMask { row: usize },
    #[error("invalid attention mask entry {value} at ({row}, {col}); expected 0 or -inf")]
    InvalidMask { row: usize, col: usize, value: f64 },
    #[error("every position was ignored; loss is empty")]
    EmptyLoss,
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("parameter `{name}` has no gradient")]
    IncompleteGradient { name: String },
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("vocabulary capacity {max_size} cannot hold the {required} required tokens")]
    Capacity { max_size: usize, required: usize },
    #[error("sequence length {len} exceeds the maximum of {max}")]
    Length { len: usize, max: usize },
    #[error("layout error: {0}")]
    Layout(String),
    #[error("could not build a corruption that differs from every gold triple")]
    CorruptionExhausted,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("infeasible synthetic corpus: {0}")]
    Spec(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
