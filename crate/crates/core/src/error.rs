use thiserror::Error;

/// Errors produced by the numerical kernels and the estimation pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix contains a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("SVD did not converge after {sweeps} Jacobi sweeps")]
    SvdNoConvergence { sweeps: usize },

    #[error(
        "matrix is rank deficient: smallest singular value {sigma_min:e} is below \
         {rel_tol:e} x largest singular value {sigma_max:e}"
    )]
    RankDeficient {
        sigma_min: f64,
        sigma_max: f64,
        rel_tol: f64,
    },

    #[error("zero-norm vector where a direction is required")]
    ZeroVector,

    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroRow { row: usize },

    #[error("row {row} is not unit length (norm {norm})")]
    NotUnitRow { row: usize, norm: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("need more rows than columns: {rows} rows for p = {p}")]
    TooFewRows { rows: usize, p: usize },

    #[error(
        "group {group} has {size} rows but the mapping model needs n_k < p = {p}; \
         split the group or raise the embedding dimension"
    )]
    GroupTooLarge { group: usize, size: usize, p: usize },

    #[error("Gram matrix of group {group} is singular: sigma_min(X_k) = {sigma_min:e}")]
    SingularGram { group: usize, sigma_min: f64 },

    #[error("invalid group partition: {0}")]
    InvalidPartition(String),

    #[error(
        "cross-validation fold leaves {train_columns} training columns but group {group} \
         has {size} rows"
    )]
    FoldTooSmall {
        group: usize,
        size: usize,
        train_columns: usize,
    },

    #[error("requested rank {requested} exceeds effective rank {effective}")]
    InsufficientRank { requested: usize, effective: usize },

    #[error(
        "only {matched} rows are estimated as matched, need more than p = {p}; \
         consider the corrected one-to-one refinement"
    )]
    MatchedSetTooSmall { matched: usize, p: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
