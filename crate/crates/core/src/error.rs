use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid box (cx={cx}, cy={cy}, w={w}, h={h}): {reason}")]
    InvalidBox {
        cx: f64,
        cy: f64,
        w: f64,
        h: f64,
        reason: &'static str,
    },

    #[error("probability {value} at prediction {pred}, class {class} is outside (0, 1)")]
    InvalidProbability {
        pred: usize,
        class: usize,
        value: f64,
    },

    #[error("non-finite cost at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },

    #[error("cannot replicate {n_gt} ground truths {k} times onto {n_pred} predictions")]
    InfeasibleReplication {
        k: usize,
        n_gt: usize,
        n_pred: usize,
    },

    #[error("brute-force matching supports at most {cap} assignable rows, got {size}")]
    SizeCapExceeded { size: usize, cap: usize },

    #[error("scene has no ground-truth objects")]
    EmptyScene,

    #[error("input is empty")]
    EmptyInput,

    #[error("correlation is undefined: zero variance")]
    DegenerateVariance,

    #[error("quality target {0} is outside [0, 1]")]
    InvalidTarget(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },

    #[error("scene sampling gave up after {tries} tries")]
    ResamplingExhausted { tries: usize },
}
