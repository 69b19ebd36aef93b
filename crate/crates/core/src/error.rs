use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("non-finite input")]
    NonFinite,

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is detached: no differentiable leaf is reachable")]
    DetachedGraph,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty report")]
    EmptyReport,

    #[error("unknown perturbation rule `{0}`")]
    UnknownRule(String),

    #[error("rule {0} needs POS tags but the report is untagged")]
    PosUnset(&'static str),

    #[error("no perturbation negatives")]
    NoNegatives,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite {component} loss at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        component: &'static str,
        epoch: usize,
        step: usize,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
