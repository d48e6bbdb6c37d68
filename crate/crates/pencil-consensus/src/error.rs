//! Error types, one enum per concern so callers can match on exactly the
//! failures their layer can handle.

use thiserror::Error;

/// Failures of the dense pencil / Lyapunov kernels.
#[derive(Debug, Error)]
pub enum PencilError {
    /// The right-hand matrix of a generalized eigenproblem is numerically
    /// singular; the pencil is malformed or needs a reduction first.
    #[error("pencil right-hand matrix is numerically singular (min |pivot| {pivot:.3e}, tolerance {tol:.3e})")]
    SingularQ2 { pivot: f64, tol: f64 },

    #[error("matrix is not symmetric positive definite (min eigenvalue {min_eig:.3e})")]
    NotSpd { min_eig: f64 },

    #[error("matrix is not symmetric negative definite (max eigenvalue {max_eig:.3e})")]
    NotSnd { max_eig: f64 },

    /// A stability prerequisite failed: some eigenvalue has real part at or
    /// above the margin. Usually means user-supplied K or G is invalid.
    #[error("matrix is not Hurwitz (max eigenvalue real part {max_re:.3e})")]
    NotHurwitz { max_re: f64 },

    #[error("matrix is not symmetric (relative asymmetry {asym:.3e})")]
    NotSymmetric { asym: f64 },

    /// The shifted QR eigenvalue iteration hit its budget without deflating.
    #[error("eigenvalue iteration did not converge within {iterations} steps")]
    NoConvergence { iterations: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Failures of graph construction and validation.
#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("adjacency matrix is not symmetric")]
    NotSymmetric,

    #[error("adjacency row {row} has {got} entries, expected {want}")]
    NotSquare { row: usize, got: usize, want: usize },

    #[error("adjacency entries must be 0 or 1 with a zero diagonal (bad entry at ({row},{col}))")]
    BadAdjacencyEntry { row: usize, col: usize },

    #[error("pinning vector length {got} does not match agent count {want}")]
    PinningLength { got: usize, want: usize },

    #[error("pinning entries must be 0 or 1 (bad entry at {index})")]
    BadPinningEntry { index: usize },

    /// The pinned Laplacian is not positive definite, so the consensus
    /// theorems' graph hypothesis fails.
    #[error("graph is disconnected or no follower is pinned (min eigenvalue of pinned Laplacian {lambda_min:.3e})")]
    DisconnectedOrUnpinned { lambda_min: f64 },

    #[error("agent index {index} out of range 1..={max}")]
    IndexOutOfRange { index: usize, max: usize },
}

/// Failures of the time-warp evaluations.
#[derive(Debug, Error)]
pub enum WarpError {
    /// Evaluation outside the schedule's valid window; the upper end of the
    /// exact-mode window stops short of the horizon by the epsilon guard.
    #[error("warp argument {value:.6e} outside domain [{lo:.6e}, {hi:.6e}]")]
    OutOfDomain { value: f64, lo: f64, hi: f64 },

    #[error("invalid schedule parameter: {0}")]
    BadParameter(String),
}

/// Failures of gain synthesis.
#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("closed-loop matrix {which} is not Hurwitz (max real part {max_re:.3e}); check K and G")]
    NotHurwitz { which: &'static str, max_re: f64 },

    /// The declared sensor sensitivity deviation exceeds what the synthesized
    /// Lyapunov pair can absorb.
    #[error("sensor sensitivity inadmissible: max deviation {max_dtheta:.4} exceeds admissible bound {admissible:.4}")]
    SensitivityInadmissible { max_dtheta: f64, admissible: f64 },

    #[error("growth rates are required for this synthesis but absent for agent {agent}")]
    MissingGrowthRates { agent: usize },

    #[error(transparent)]
    Pencil(#[from] PencilError),

    #[error(transparent)]
    Topology(#[from] TopologyError),

    #[error("invalid parameter: {0}")]
    BadParameter(String),
}

/// Failures during closed-loop integration.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("state became non-finite at t = {t:.6e} (agent {agent})")]
    NonFinite { t: f64, agent: usize },

    #[error("integration step underflowed at t = {t:.6e}")]
    StepUnderflow { t: f64 },

    #[error("step budget of {budget} exhausted at t = {t:.6e}")]
    StepBudget { t: f64, budget: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("bad agent model: {0}")]
    Model(String),

    #[error(transparent)]
    Warp(#[from] WarpError),

    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
}

/// Failures of configuration parsing and validation.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),

    /// Syntax level failure, with the parser's location info preserved.
    #[error("config parse error: {0}")]
    Parse(String),

    /// Semantic level failure; every violated constraint is listed.
    #[error("config validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),
}

/// Top-level CLI failure wrapper.
#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("report error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Usage(String),
}
