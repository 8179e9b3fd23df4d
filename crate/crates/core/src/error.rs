use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("tensor shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("{op}: target must be binary (found {value} at index {index})")]
    NonBinary { op: &'static str, index: usize, value: f64 },

    #[error("variable belongs to a different tape")]
    ForeignVar,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is detached: no recorded input requires a gradient")]
    Detached,

    #[error("backward already ran on this tape; call zero_grad first")]
    BackwardTwice,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("presence mask has {got} entries but the network has {expected} classes")]
    MaskLength { expected: usize, got: usize },

    #[error("unknown class {0}")]
    UnknownClass(String),

    #[error("missing gradient for parameter {0}")]
    MissingGrad(String),

    #[error("phantom placement failed after {attempts} attempts: {reason}")]
    Placement { attempts: usize, reason: String },

    #[error("only {available} fully labeled volumes available, {requested} requested")]
    NotEnoughFullyLabeled { available: usize, requested: usize },

    #[error("class {class} is available in {available} volumes, {requested} requested")]
    NotEnoughClassVolumes { class: String, available: usize, requested: usize },

    #[error("volume {0} not found")]
    MissingVolume(String),

    #[error("empty {0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
