use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by chain construction, spectral analysis and tensor I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not square: {rows} rows, {len} entries")]
    NonSquare { rows: usize, len: usize },
    #[error("negative entry {value} at ({row}, {col})")]
    NegativeEntry { row: usize, col: usize, value: f64 },
    #[error("row {row} sums to {sum}, expected 1")]
    RowSumViolation { row: usize, sum: f64 },
    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("teleportation weight {0} outside (0, 1)")]
    AlphaOutOfRange(f64),
    #[error("invalid chain configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("operation requires a {expected} matrix")]
    WrongOrientation { expected: &'static str },
    #[error("{states} states exceeds the limit of {limit}")]
    SizeExceeded { states: usize, limit: usize },
    #[error("matrix has a non-positive entry; apply teleportation first")]
    NonPositiveMatrix,
    #[error("no convergence after {iterations} iterations (last change {change:e})")]
    ConvergenceFailure { iterations: usize, change: f64 },
    #[error("head list is empty")]
    EmptyHeadList,
    #[error("invalid head weights: {0}")]
    InvalidWeights(String),
    #[error("token index {index} out of range for {len} tokens")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("every token is masked")]
    AllTokensMasked,
    #[error("tensor has no spatial grid")]
    MissingGrid,
    #[error("tensor has no special tokens")]
    MissingSpecialTokens,
    #[error("grid {height}x{width} does not fit {len} values")]
    GridMismatch { height: usize, width: usize, len: usize },
    #[error("invalid attention tensor: {0}")]
    InvalidTensor(String),

    #[error("not an NPY file (bad magic)")]
    BadMagic,
    #[error("unsupported NPY version {0}.{1}")]
    UnsupportedVersion(u8, u8),
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("fortran-ordered arrays are not supported")]
    FortranOrderUnsupported,
    #[error("truncated data: expected {expected} bytes, found {found}")]
    TruncatedData { expected: usize, found: usize },
    #[error("parse error: {0}")]
    ParseError(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
