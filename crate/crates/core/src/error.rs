//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("bad magic in {what}: expected {expected}, found {found}")]
    BadMagic {
        what: String,
        expected: String,
        found: String,
    },

    #[error("unsupported CEGM version {0}")]
    UnsupportedVersion(u32),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated blob: {0}")]
    TruncatedBlob(String),

    #[error("rejected invalid network: {0}")]
    RejectedInvalid(String),

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("no samples for class {0}")]
    EmptyClass(usize),

    #[error("class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("invalid graph layer {layer}: {reason}")]
    InvalidLayer { layer: usize, reason: String },

    #[error("invalid path group: {0}")]
    InvalidGroup(String),

    #[error("invalid intervention policy: {0}")]
    InvalidPolicy(String),

    #[error("too few samples for the significance test: {got} < {min}")]
    TooFewSamples { got: usize, min: usize },

    #[error("node {node} of layer {layer} is not a critical node of the graph")]
    NotInGraph { layer: usize, node: usize },

    #[error("node {node} of layer {layer} has no critical parents")]
    NoParents { layer: usize, node: usize },

    #[error("layer {0} has no critical nodes")]
    NoCriticalNodes(usize),

    #[error("every perturbation draw was degenerate")]
    AllDrawsDegenerate,

    #[error("unperturbed class probability {0} is too small")]
    ZeroBaseline(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
