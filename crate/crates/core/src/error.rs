use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid corpus spec: {0}")]
    Spec(String),

    #[error("gradient oracle invalid: {0}")]
    OracleInvalid(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("parse error in record {record}: {msg}")]
    Format { record: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn dim(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            msg: msg.into(),
        }
    }
}
