use std::io;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box coordinates must be finite")]
    NonFinite,
    #[error("box extent must be positive, got w={w} h={h}")]
    EmptyExtent { w: f64, h: f64 },
    #[error("proposal score {0} outside [0, 1]")]
    ScoreRange(f64),
    #[error("{0} fraction {1} outside [0, 1]")]
    FractionRange(&'static str, f64),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Failures while reading or validating the binary map formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid stride {0}; expected one of 1, 2, 4, 8, 16")]
    Stride(u32),
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("label value {value} at index {index} exceeds the largest class index")]
    LabelRange { index: usize, value: u8 },
    #[error("edge intensity {value} at index {index} outside [0, 1]")]
    EdgeRange { index: usize, value: f32 },
    #[error("invalid layer name: {0}")]
    LayerName(String),
    #[error("malformed record: {0}")]
    Record(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl FormatError {
    pub(crate) fn from_read(e: io::Error, what: &str) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            FormatError::Truncated(what.to_string())
        } else {
            FormatError::Io(e)
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("region of interest lies outside the {map_h}x{map_w} map")]
    DegenerateRoi { map_h: usize, map_w: usize },
    #[error("invalid pooling grid {m}x{n}")]
    Grid { m: usize, n: usize },
    #[error("histogram pooling needs at least 2 bins, got {0}")]
    Bins(usize),
    #[error("stride must be at least 1")]
    Stride,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PcaError {
    #[error("PCA needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("sample {index} has length {len}, expected {expected}")]
    RaggedSamples { index: usize, len: usize, expected: usize },
    #[error("vector length {got} does not match projector input dimension {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("invalid PCA target: {0}")]
    Target(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForestError {
    #[error("descriptor length {got} does not match the trained length {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("no positive training samples")]
    NoPositives,
    #[error("no negative training samples")]
    NoNegatives,
    #[error("invalid training configuration: {0}")]
    Config(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no eligible ground-truth boxes; metric undefined")]
    NoEligibleGroundTruth,
    #[error("no images to evaluate")]
    NoImages,
    #[error("invalid protocol: {0}")]
    Protocol(String),
}

/// Crate-level error for the orchestration layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Pca(#[from] PcaError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("image {image_id} has no layer {layer:?}")]
    MissingLayer { image_id: String, layer: String },
    #[error("image {0} has no semantic label map but the semantic channel is enabled")]
    MissingLabels(String),
    #[error("image {0} has no edge map but the edge channel is enabled")]
    MissingEdges(String),
    #[error("projector for bin {bin} maps {input}->{output}, descriptor layout needs {expected_in}->{expected_out}")]
    ProjectorMismatch { bin: usize, input: usize, output: usize, expected_in: usize, expected_out: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
