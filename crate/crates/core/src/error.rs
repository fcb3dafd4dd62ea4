//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("empty matrix not allowed: {0}")]
    EmptyMatrix(String),

    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("iteration budget exhausted: {0}")]
    NoConvergence(String),

    #[error("Riccati solve failed (unstabilizable configuration): {0}")]
    Unstabilizable(String),

    #[error("matrix logarithm undefined: {0}")]
    LogUndefined(String),

    #[error("QP infeasible: {0}")]
    QpInfeasible(String),

    #[error("QP solver failed: {0}")]
    QpNumerical(String),

    #[error("node {0} has no neighbors in the communication graph")]
    IsolatedNode(usize),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("simulation diverged at t = {t} s: {detail}")]
    SimulationBlowUp { t: f64, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("identification failed: {0}")]
    Identification(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
