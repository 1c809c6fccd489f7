use thiserror::Error;

/// Errors produced anywhere in the extraction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("unknown value or tap `{0}`")]
    UnknownValue(String),

    #[error("`{0}` is a weight tensor, not an activation value")]
    NotAnActivation(String),

    #[error("no path from `{from}` to `{to}` in the graph")]
    NotConnected { from: String, to: String },

    #[error("block from `{from}` to `{to}` also depends on `{other}`, so `{from}` does not cut the graph")]
    NotACut {
        from: String,
        to: String,
        other: String,
    },

    #[error("taps are not totally ordered along the graph: `{0}` and `{1}`")]
    TapsNotOrdered(String, String),

    #[error("channel {index} out of range for `{value}` with {width} channels")]
    ChannelOutOfRange {
        value: String,
        index: usize,
        width: usize,
    },

    #[error("malformed protobuf: {0}")]
    Framing(String),

    #[error("unsupported op `{op}` in node `{node}`")]
    UnsupportedOp { op: String, node: String },

    #[error("unsupported opset version {0} (supported: 11-17)")]
    UnsupportedOpset(i64),

    #[error("input `{input}` of node `{node}` must be a constant weight")]
    NonConstantWeight { node: String, input: String },

    #[error("dynamic dimension `{0}` is not supported")]
    DynamicShape(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("empty graph")]
    EmptyGraph,

    #[error("weight blob holds {actual} floats but the descriptor declares {expected}")]
    BlobLength { expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("no image in `{dir}` is classified as class {class}")]
    NoClassImages { dir: String, class: usize },

    #[error("empty core set for a node at tap `{0}`")]
    EmptyCoreSet(String),

    #[error("unsupported circuit file version `{0}`")]
    UnsupportedVersion(String),

    #[error("checksum mismatch: file says {expected}, content hashes to {actual}")]
    Checksum { expected: String, actual: String },

    #[error("unknown patch id {0}")]
    UnknownPatch(u64),

    #[error("unknown group id {0}")]
    UnknownGroup(usize),

    #[error("empty concept: a label request needs at least one exemplar per group")]
    EmptyConcept,

    #[error("labeling transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },

    #[error("labeling endpoint is not configured: set {0}")]
    MissingEndpoint(&'static str),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
