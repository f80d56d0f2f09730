use alloc::string::String;

/// Errors produced by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Operand extents are incompatible.
    #[error("shape error: {0}")]
    Shape(String),
    /// A documented precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A parameter value is out of its valid domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),
    /// Batch statistics requested on a batch of a single sample.
    #[error("degenerate batch: batch norm in train mode needs at least 2 samples, got {0}")]
    DegenerateBatch(usize),
    /// Cosine similarity of a zero-norm vector.
    #[error("degenerate similarity: projected vector has zero norm")]
    DegenerateSimilarity,
    /// Point configuration does not determine a unique homography.
    #[error("rank-deficient point configuration")]
    RankDeficient,
    /// Robust estimation found no acceptable model.
    #[error("estimation failed: {0}")]
    EstimationFailed(String),
    /// A configured resource bound would be exceeded.
    #[error("resource limit exceeded: {0}")]
    Resource(String),
    /// NaN or infinity encountered where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(alloc::format!($($arg)*))
    };
}

macro_rules! contract_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(alloc::format!($($arg)*))
    };
}

macro_rules! param_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Parameter(alloc::format!($($arg)*))
    };
}

pub(crate) use {contract_err, param_err, shape_err};
