//! Error types shared across the toolkit.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-range input (counts, tables, CSV schemas, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// Estimated sensitivity + specificity equals 1; the assay carries no
    /// information and the Rogan-Gladen denominator vanishes.
    #[error("degenerate assay: estimated sensitivity + specificity equals 1 (uninformative test)")]
    DegenerateAssay,

    /// No usable observations remain (e.g. every stratum was dropped).
    #[error("no usable data: {0}")]
    NoData(String),

    /// Rank-deficient or otherwise unusable design matrix.
    #[error("design error: {0}")]
    Design(String),

    /// Quasi-complete separation detected during a regression fit.
    #[error("separation detected: {0}")]
    Separation(String),

    /// Iteration cap reached before the fit converged.
    #[error("fit did not converge after {iterations} iterations (score max-norm {score_norm:.3e})")]
    NonConvergence { iterations: usize, score_norm: f64 },

    /// A matrix that must be inverted is singular.
    #[error("singular matrix: {0}")]
    Singular(String),

    /// A simulation scenario cannot be generated with the requested parameters.
    #[error("infeasible scenario: {0}")]
    Infeasible(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 input, 3 numeric, 4 degenerate assay.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Input(_) | Error::NoData(_) | Error::Infeasible(_) | Error::Io(_) => 2,
            Error::Design(_)
            | Error::Separation(_)
            | Error::NonConvergence { .. }
            | Error::Singular(_) => 3,
            Error::DegenerateAssay => 4,
        }
    }
}
