use thiserror::Error;

/// Errors raised by the numerical kernels and the model types built on them.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not Hermitian: max asymmetry {asymmetry:.3e}")]
    NotHermitian { asymmetry: f64 },

    #[error("matrix is not positive semidefinite: smallest eigenvalue {min_eigenvalue:.3e}")]
    NotPositive { min_eigenvalue: f64 },

    #[error("trace is {trace:.17} instead of 1")]
    BadTrace { trace: f64 },

    #[error("matrix is not an isometry: ||V^dag V - I|| = {deviation:.3e}")]
    NotIsometry { deviation: f64 },

    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix contains non-finite entries")]
    NonFinite,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("Kraus operators violate completeness: ||sum M^dag M - I|| = {residual:.3e}")]
    Incomplete { residual: f64 },

    #[error("Kraus operator {index} is identically zero")]
    ZeroOperator { index: usize },

    #[error("empty operator list")]
    EmptyChannel,

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("outcome index {index} out of range for {count} outcomes")]
    OutcomeOutOfRange { index: usize, count: usize },

    #[error("block {block} has zero probability for both the state and the fallback")]
    NoAdmissibleFallback { block: usize },

    #[error("{quantity} computed as {computed:.17} but the reference value is {expected:.17}")]
    ReferenceDrift {
        quantity: String,
        computed: f64,
        expected: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
