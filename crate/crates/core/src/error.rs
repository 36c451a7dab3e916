use crate::grid::Shape;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: Shape, found: Shape },

    #[error("grid of shape {shape} needs {expected} values, got {found}")]
    LengthMismatch {
        shape: Shape,
        expected: usize,
        found: usize,
    },

    #[error("degenerate shape {0}: every dimension must be positive")]
    DegenerateShape(Shape),

    #[error("non-finite value at flat index {index}")]
    NonFiniteValue { index: usize },

    #[error("time {t} outside the allowed range {range}")]
    TimeOutOfRange { t: f64, range: &'static str },

    #[error("euler step must move toward data: t_to ({t_to}) must be below t_from ({t_from})")]
    StepDirection { t_from: f64, t_to: f64 },

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("non-finite velocity at step {step} (t = {t})")]
    NonFiniteVelocity { step: usize, t: f64 },

    #[error("intervention step index {index} out of range (recorded {recorded})")]
    StepIndexOutOfRange { index: usize, recorded: usize },

    #[error("unknown instruction code {code} (vocabulary size {vocab})")]
    UnknownInstruction { code: u8, vocab: usize },

    #[error("training diverged at iteration {iteration}: loss is {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("need at least {needed} images, got {found}")]
    TooFewImages { needed: usize, found: usize },

    #[error("zero distance between images {index} and {} in a smoothness denominator", .index + 2)]
    ZeroDenominator { index: usize },

    #[error("edit strength {index} is zero")]
    ZeroStrength { index: usize },

    #[error("mask selects no elements")]
    EmptyMask,

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
