use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("graph input `{0}` is not bound")]
    UnboundInput(String),

    #[error("unknown graph input `{0}`")]
    NotAnInput(String),

    #[error("backward requires a scalar output, node {node} has shape {shape:?}")]
    NonScalarOutput { node: usize, shape: Vec<usize> },

    #[error("node {0} has not been evaluated; call forward first")]
    NotEvaluated(usize),

    #[error("cannot build a gradient graph through {op} input {input}")]
    UnsupportedGradient { op: &'static str, input: usize },

    #[error("finite-difference check could not avoid relu/maxpool kinks after {retries} retries")]
    KinkProximity { retries: usize },

    #[error("class {class} out of range for {num_classes} classes")]
    InvalidClass { class: usize, num_classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("rectangle {rect:?} does not fit in a {width}x{height} image")]
    RectOutOfBounds {
        rect: (usize, usize, usize, usize),
        width: usize,
        height: usize,
    },

    #[error("heatmap resolution mismatch: {0:?} vs {1:?}")]
    ResolutionMismatch((usize, usize), (usize, usize)),

    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Divergence { epoch: usize, step: usize },

    #[error("empty {0} split")]
    EmptySplit(&'static str),

    #[error("model file: bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("model file: unsupported version {0}")]
    VersionMismatch(u32),

    #[error("model file: truncated")]
    TruncatedFile,

    #[error("model file: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("model file: {0}")]
    InvalidModel(String),

    #[error("image format: {0}")]
    ImageFormat(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
