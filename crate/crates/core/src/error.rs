use thiserror::Error;

/// Errors raised by the cloth simulator.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no graspable particle within {max_dist} m of pick point")]
    NoGraspableParticle { max_dist: f64 },
    #[error("cloth is already grasped at particle {0}")]
    AlreadyGrasped(usize),
    #[error("cloth is not grasped")]
    NotGrasped,
    #[error("numerical divergence during {phase} substep {substep}")]
    NumericalDivergence { phase: &'static str, substep: usize },
}

/// Errors raised by the geometry kernels.
#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("occupancy grids do not share origin, cell size and dimensions")]
    GridMismatch,
    #[error("degenerate hull: need at least 3 non-collinear points, got {points} points")]
    DegenerateHull { points: usize },
}

/// Errors raised by perception.
#[derive(Debug, Error)]
pub enum PerceptionError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("bottom point set is empty; cannot freeze reference")]
    EmptyBottom,
    #[error("bottom reference already frozen for this episode")]
    AlreadyFrozen,
    #[error("point cloud csv parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Errors raised by the mask-ensemble operations and PNM I/O.
#[derive(Debug, Error)]
pub enum MaskError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("mask dimensions {got_w}x{got_h} do not match expected {want_w}x{want_h}")]
    DimensionMismatch {
        want_w: usize,
        want_h: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("pnm parse error: {0}")]
    Pnm(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Errors raised by the adaptation module.
#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("observation timestamp {got} is not after last entry {last}")]
    OutOfOrder { got: u64, last: u64 },
    #[error("insufficient history: need at least {need} entries, have {have}")]
    InsufficientHistory { need: usize, have: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Errors raised by the planner.
#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("planning failure: every candidate rollout diverged")]
    AllCandidatesDiverged,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Errors raised by the episode/benchmark harness.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("config parse error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },
    #[error("infeasible config: {0}")]
    InfeasibleConfig(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
