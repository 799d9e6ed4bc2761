use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("vector norm below 1e-12")]
    ZeroNormVector,

    #[error("empty input")]
    EmptyInput,

    #[error("non-finite function value when perturbing coordinate {0}")]
    NonFiniteEvaluation(usize),

    #[error("checkpoint list is empty")]
    EmptyList,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("label {label} out of range for {num_labels} labels")]
    LabelOutOfRange { label: usize, num_labels: usize },

    #[error("contrastive batch needs a bijective target/source pairing")]
    MissingPairing,

    #[error("no same-label source representation for class {0}")]
    NoPositiveAvailable(usize),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("class {class} has {available} instances but {required} are required")]
    InsufficientInstances {
        class: usize,
        required: usize,
        available: usize,
    },

    #[error("instance {0} has no parallel twin")]
    MissingParallelTwin(String),

    #[error("class {0} has no members")]
    EmptyClass(usize),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("method {method} requires a paired episode")]
    MethodEpisodeMismatch { method: String },

    #[error("layer {layer} outside [1, {num_layers}]")]
    LayerOutOfRange { layer: usize, num_layers: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub trait StageContext<T> {
    /// Tags an error with the pipeline stage that produced it.
    fn stage(self, stage: impl Into<String>) -> Result<T>;
}

impl<T, E: Into<Error>> StageContext<T> for std::result::Result<T, E> {
    fn stage(self, stage: impl Into<String>) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage: stage.into(),
            source: Box::new(e.into()),
        })
    }
}
