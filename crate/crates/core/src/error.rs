use thiserror::Error;

/// Errors raised by the editing laboratory.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("zero-norm input to normalisation")]
    ZeroNorm,

    #[error("zero-variance input to layer normalisation")]
    ZeroVariance,

    #[error("normalisation weight has a zero entry at index {0}")]
    ZeroNormWeight(usize),

    #[error("layer {layer} out of range 1..={n_layers}")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("sequence of length {len} exceeds context window {window}")]
    ContextOverflow { len: usize, window: usize },

    #[error("empty prompt")]
    EmptyPrompt,

    #[error("architecture mismatch: {0}")]
    FamilyMismatch(String),

    #[error("zero mean feature vector")]
    ZeroMean,

    #[error("bias direction has non-positive projection {0} onto the trigger feature")]
    NonPositiveBiasProjection(f64),

    #[error("non-finite objective after {iters} iterations")]
    NonFiniteObjective { iters: usize, trace: Vec<f64> },

    #[error("duplicate trigger prompt for edit {0}")]
    DuplicateTrigger(String),

    #[error("unknown edit id {0}")]
    UnknownEdit(String),

    #[error("cap acceptance rate {rate:e} below 1e-6 after {proposals} proposals")]
    CapTooSmall { rate: f64, proposals: u64 },

    #[error("trigger budget exhausted after {0} candidates")]
    BudgetExhausted(usize),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

impl LabError {
    /// True for errors caused by bad caller input rather than a failing stage.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            LabError::InvalidConfig(_)
                | LabError::InvalidArgument(_)
                | LabError::ShapeMismatch { .. }
                | LabError::LayerOutOfRange { .. }
                | LabError::ContextOverflow { .. }
                | LabError::EmptyPrompt
                | LabError::FamilyMismatch(_)
                | LabError::DuplicateTrigger(_)
                | LabError::UnknownEdit(_)
                | LabError::EmptyCorpus
                | LabError::Format(_)
                | LabError::Json(_)
        )
    }
}
