use crate::stacking::SimplexWeights;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Cholesky factorization failed; `minor` is the 1-based order of the
    /// first leading minor that is not positive.
    #[error("matrix is not symmetric positive definite (leading minor {minor} is not positive)")]
    NonSpdMatrix { minor: usize },

    #[error("inverse-Wishart degrees of freedom {dof} must exceed q - 1 = {}", *q as f64 - 1.0)]
    InvalidDof { dof: f64, q: usize },

    #[error("spatial variance proportion alpha = {0} must lie in the open interval (0, 1)")]
    InvalidAlpha(f64),

    #[error("decay rate phi = {0} must be positive and finite")]
    InvalidPhi(f64),

    #[error("invalid fold count L = {folds} for n = {n} rows (need 2 <= L <= n)")]
    InvalidFoldCount { folds: usize, n: usize },

    #[error("subset {subset} has {size} rows; at least {required} are required")]
    ShardTooSmall {
        subset: usize,
        size: usize,
        required: usize,
    },

    #[error("simplex solver did not converge after {iterations} iterations{}", subset_suffix(*subset))]
    ConvergenceFailure {
        iterations: usize,
        best: SimplexWeights,
        subset: Option<usize>,
    },

    #[error("data quality: {0}")]
    DataQuality(String),

    #[error("design matrix is rank deficient (rank {rank} < {p} columns)")]
    RankDeficient { rank: usize, p: usize },

    #[error("variogram bin {bin} has no pairs")]
    TooFewPairs { bin: usize },

    #[error("variogram fit diverged: {0}")]
    FitDiverged(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed artifact: {0}")]
    Artifact(String),
}

fn subset_suffix(subset: Option<usize>) -> String {
    match subset {
        Some(k) => format!(" (subset {k})"),
        None => String::new(),
    }
}

impl Error {
    /// True for failures of the numerical machinery rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonSpdMatrix { .. }
                | Error::ConvergenceFailure { .. }
                | Error::FitDiverged(_)
        )
    }
}

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::DimensionMismatch(msg.into())
}
