use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("dtype mismatch in {op}: expected {expected:?}, got {got:?}")]
    DType {
        op: &'static str,
        expected: crate::tensor::DType,
        got: crate::tensor::DType,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward called on a graph that was already consumed")]
    GraphConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss does not depend on any tensor that requires grad")]
    NoGraph,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("layer is already fused")]
    AlreadyFused,

    #[error("non-positive variance in batch norm channel {0}")]
    NonPositiveVariance(usize),

    #[error("head mask must be binary, found {0}")]
    NonBinaryMask(f32),

    #[error("unknown attention layer {0}")]
    UnknownLayer(usize),

    #[error("zero-norm attention map for head {0}")]
    ZeroNormHead(usize),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("bad magic: expected \"SHVW\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("manifest mismatch for {name}: {detail}")]
    ManifestMismatch { name: String, detail: String },

    #[error("truncated file: expected {expected} bytes of {what}, found {found}")]
    Truncated {
        what: &'static str,
        expected: u64,
        found: u64,
    },

    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
