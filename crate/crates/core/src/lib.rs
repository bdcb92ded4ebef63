//! Bi-level meta-learning optimization lab.
//!
//! Implements first-order hypergradient estimators built on finite differences
//! of a perturbed proximal inner problem, alongside exact and baseline
//! estimators (FO-MAML, Reptile, iMAML, unrolled MAML) on synthetic quadratic
//! task families with closed-form oracles. An experiment harness sweeps bias,
//! convergence-order, and smoothness properties and writes deterministic CSV.

pub mod cli;
pub mod estimator;
pub mod experiment;
pub mod nonquad;
pub mod oracle;
pub mod outer;
pub mod solver;
pub mod task;

pub use nalgebra::{DMatrix, DVector};

/// Column vector of f64, the working type for parameters and gradients.
pub type Vector = DVector<f64>;
/// Dense square matrix of f64.
pub type Matrix = DMatrix<f64>;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("singular system: shifted-matrix eigenvalue {eigenvalue:.3e} is within {tol:.1e} of zero")]
    Singular { eigenvalue: f64, tol: f64 },
    #[error("step size too large: objective increased for {0} consecutive iterations")]
    Divergence(usize),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("task {index}: {source}")]
    Task {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o failure on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config error: {0}")]
    Parse(String),
    #[error("log-log fit needs at least {needed} positive points, got {got}")]
    FitUnderdetermined { needed: usize, got: usize },
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
