use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("monomial count overflows for {n_vars} variables of degree {degree}")]
    MonomialOverflow { n_vars: usize, degree: usize },

    #[error("invalid denominator: {0}")]
    InvalidDenominator(String),

    #[error("parameter layout mismatch: expected {expected} parameters, got {got}")]
    LayoutMismatch { expected: usize, got: usize },

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("non-finite sample {value} at node (t index {t_index}, x index {x_index})")]
    NonFiniteSample { t_index: usize, x_index: usize, value: f64 },

    #[error("{n_modes} modes are not resolvable on a grid with {n_x} spatial nodes")]
    UnresolvableModes { n_modes: usize, n_x: usize },

    #[error("invalid measurement: {0}")]
    InvalidMeasurement(String),

    #[error("non-finite value in objective part `{part}`")]
    NonFiniteObjective { part: &'static str },

    #[error("non-finite gradient at epoch {epoch}")]
    NonFiniteGradient { epoch: usize },

    #[error("cycle {cycle}: {source}")]
    Cycle {
        cycle: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown experiment `{0}` (valid: advection, exponential)")]
    UnknownExperiment(String),

    #[error("unknown activation `{0}` (valid: sine, exponential)")]
    UnknownActivation(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
