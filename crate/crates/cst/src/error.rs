//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the estimation, inference, and harness layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric within tolerance {tol:e} (max asymmetry {found:e})")]
    NotSymmetric { tol: f64, found: f64 },

    #[error("matrix is near-singular: eigenvalue {eigenvalue:e} below floor {floor:e}")]
    NearSingular { eigenvalue: f64, floor: f64 },

    #[error("constraint matrix is rank-deficient: numerical rank {rank} < {rows} rows")]
    RankDeficient { rank: usize, rows: usize },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("negative argument {0} where a non-negative value is required")]
    NegativeArg(f64),

    #[error("step size must be positive, got {0}")]
    NonpositiveStep(f64),

    #[error("covariance specification is not symmetric positive definite: {0}")]
    InvalidCovariance(String),

    #[error("site {site} unreachable: {reason}")]
    SiteUnreachable { site: usize, reason: String },

    #[error("no site is eligible for variance estimation (min_site_n = {min_site_n})")]
    NoEligibleSites { min_site_n: usize },

    #[error("solver diverged: objective increased after backtracking floor at iteration {iter}")]
    Diverged { iter: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("site schemas do not match: {0}")]
    SchemaMismatch(String),

    #[error("site data file {0} contains no observations")]
    EmptySite(String),

    #[error("bad hypothesis specification: {0}")]
    BadHypothesis(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("TOML error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors rooted in numerical failure rather than bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotSymmetric { .. }
                | Error::NearSingular { .. }
                | Error::RankDeficient { .. }
                | Error::Diverged { .. }
                | Error::NonFinite(_)
        )
    }
}
