use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("non-finite coordinate in point {index}")]
    NonFinitePoint { index: usize },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("degenerate segment: {0}")]
    DegenerateSegment(&'static str),
    #[error("degenerate correspondence configuration: {0}")]
    DegenerateConfiguration(&'static str),
    #[error("degenerate convex hull: {0}")]
    DegenerateHull(&'static str),
    #[error("original grid has no occupied voxel")]
    EmptyOriginal,

    #[error("bad magic bytes in weights container")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),
    #[error("container checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("container truncated at byte {offset}")]
    TruncatedContainer { offset: usize },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("unknown network architecture `{0}`")]
    UnknownArchitecture(String),
    #[error("architecture mismatch: expected `{expected}`, found `{found}`")]
    ArchitectureMismatch { expected: String, found: String },
    #[error("invalid weights: tensor `{0}` contains a non-finite value")]
    InvalidWeights(String),
    #[error("descriptor variant mismatch: expected {expected}, found {found}")]
    VariantMismatch { expected: String, found: String },

    #[error("duplicate pose-graph node (robot {robot}, index {index})")]
    DuplicateNode { robot: u32, index: u32 },
    #[error("pose-graph node (robot {robot}, index {index}) does not exist")]
    MissingNode { robot: u32, index: u32 },
    #[error("information matrix is not symmetric positive definite")]
    NonSpdInformation,
    #[error("pose-graph component containing (robot {robot}, index {index}) has no prior factor")]
    DisconnectedGauge { robot: u32, index: u32 },
    #[error("normal equations are singular")]
    SingularSystem,

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: truncated record at byte offset {offset}")]
    TruncatedRecord { path: PathBuf, offset: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
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

    pub(crate) fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}
