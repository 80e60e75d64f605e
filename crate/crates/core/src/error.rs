use thiserror::Error;

/// Errors raised across model construction, inference and comparison.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid noise `{name}`: {reason}")]
    InvalidNoise { name: String, reason: String },

    #[error("duplicate name `{0}`")]
    DuplicateName(String),

    #[error("noise space is not enumerable: `{0}` has continuous support")]
    NotEnumerable(String),

    #[error("cyclic graph: {}", .cycle.join(" -> "))]
    CyclicGraph { cycle: Vec<String> },

    #[error("unknown reference `{0}`")]
    UnknownReference(String),

    #[error("no table entry for `{var}` at inputs {key:?}")]
    MissingTableEntry { var: String, key: Vec<f64> },

    #[error("table input `{0}` is not discrete-valued")]
    TableInputNotDiscrete(String),

    #[error("treatment value {0} lies outside the declared support")]
    TreatmentOutOfSupport(f64),

    #[error("invalid intervention: {0}")]
    InvalidIntervention(String),

    #[error("engine not applicable: {0}")]
    EngineInapplicable(String),

    #[error("conditioning event has probability zero")]
    ZeroProbabilityEvidence,

    #[error("rejection sampling accepted 0 of {0} draws")]
    EmptyAcceptance(usize),

    #[error("models live on different noise spaces")]
    SpaceMismatch,

    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("positivity violated: {0}")]
    PositivityViolation(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),
}

pub type Result<T> = std::result::Result<T, Error>;
