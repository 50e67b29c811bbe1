use thiserror::Error;

/// Errors raised by grid construction, assembly, solvers and the experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("odd angular count: n_phi = {0} must be even")]
    OddAngularCount(usize),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("observation region touches the boundary ring: omega_radius = {radius} must lie in (0, {limit})")]
    OmegaTouchesBoundary { radius: f64, limit: f64 },

    #[error("observation region must contain the origin (critical point of the weight function)")]
    OmegaExcludesOrigin,

    #[error("trace-incompatible state at boundary node {node}: bulk {bulk} != surface {surf}")]
    TraceIncompatible { node: usize, bulk: f64, surf: f64 },

    #[error("non-elliptic {field} at node {node}: smallest eigenvalue {eig} < beta = {beta}")]
    NonElliptic {
        field: &'static str,
        node: usize,
        eig: f64,
        beta: f64,
    },

    #[error("diffusion matrix has a polar cross component {value} at node {node}; only polar-aligned A is supported")]
    CrossDiffusion { node: usize, value: f64 },

    #[error("zero pivot in banded LU at row {0}")]
    SingularPivot(usize),

    #[error("linear solve did not converge: relative residual {0:e} > 1e-10")]
    SolverNonconvergence(f64),

    #[error("time step {dt} is not aligned with {what} = {value}")]
    MisalignedStep { dt: f64, what: &'static str, value: f64 },

    #[error("{0}")]
    InvalidWindow(String),

    #[error("time {t} lies outside the open window ({t0}, {t1})")]
    OutsideWindow { t: f64, t0: f64, t1: f64 },

    #[error("too few interior time nodes: {0} < 3")]
    TooFewTimeNodes(usize),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("inadmissible input: {0}")]
    Inadmissible(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("configuration error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code: 2 for numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::SingularPivot(_) | Error::SolverNonconvergence(_) | Error::Numerical(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
