use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite logits")]
    NonFiniteLogits,

    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("rejection cap exceeded for class {class} after {attempts} attempts")]
    RejectionCap { class: usize, attempts: usize },

    #[error("no dense/sparse contexts survived the mean-norm filter")]
    NoDenseSparseContexts,

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("all {0} contexts were excluded as numerically unstable")]
    AllContextsExcluded(usize),

    #[error("{0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, expected: impl ToString, got: impl ToString) -> Error {
    Error::Shape {
        op,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
