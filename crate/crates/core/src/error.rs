use thiserror::Error;

/// Errors produced by the grasping pipeline and its supporting modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("slerp endpoints collinear")]
    CollinearEndpoints,
    #[error("group count must be at least 1")]
    ZeroGroups,
    #[error("quaternion is not unit length (norm {0})")]
    NonUnitQuaternion(f64),
    #[error("grid too large: {0} voxels")]
    GridTooLarge(u64),
    #[error("region budget exceeded: more than {0} voxels")]
    RegionBudgetExceeded(usize),
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("tape already consumed")]
    TapeConsumed,
    #[error("diverged at step {0}")]
    Diverged(u64),
    #[error("point outside normalized domain: {0:?}")]
    OutsideDomain([f64; 3]),
    #[error("misaligned grids: {0}")]
    MisalignedGrids(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("architecture mismatch: checkpoint has `{found}`, expected `{expected}`")]
    ArchitectureMismatch { expected: String, found: String },
    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::ShapeMismatch { expected: expected.into(), actual: actual.into() }
    }

    pub(crate) fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format { format, reason: reason.into() }
    }
}
