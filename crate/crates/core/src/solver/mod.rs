//! Numerical back ends: dense simplex, relative-interior search, a log-barrier
//! LMI method, and symmetric eigenvalue helpers.

pub mod eigen;
pub mod interior;
pub mod lmi;
pub mod lp;
pub mod spectral;

pub use eigen::{spectral_radius, symmetric_eigenvalues, symmetric_spectral_norm};
pub use lp::{lp_feasible, lp_minimize, LpFeasibilityProblem, LpOutcome, LpSolution, LpStatus, Sense};
pub use spectral::{
    spectral_feasible, AffineMatrix, SpectralFeasibilityProblem, SpectralOutcome, SpectralSolver,
    DEFAULT_SPECTRAL_TOL,
};

/// Default tolerance for linear feasibility verdicts.
pub const DEFAULT_LP_TOL: f64 = 1e-8;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite entry in problem data")]
    NonFinite,
    #[error("matrix is not symmetric (relative asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("{0}")]
    Domain(String),
    #[error("starting point is not strictly feasible")]
    NotStrictlyFeasible,
    #[error("constraints are infeasible")]
    Infeasible,
    #[error("numerical failure: {0}")]
    Numerical(String),
}
