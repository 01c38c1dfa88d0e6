use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("failed to parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

impl ConfigError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Self::Invalid(msg.into())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("integration diverged at t = {time:.3} s ({what})")]
    IntegrationDiverged { time: f64, what: String },
    #[error("pitch {pitch_deg:.1} deg is inside the Euler-rate singular band")]
    AttitudeSingular { pitch_deg: f64 },
    #[error("time step {0} s outside (0, 0.02]")]
    InvalidStep(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DownwashError {
    #[error("axial distance {z} m is not downstream of the efflux plane at {z0} m")]
    InvalidGeometry { z: f64, z0: f64 },
    #[error("invalid downwash model: {0}")]
    InvalidModel(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("QP infeasible (phase-one residual {residual:.3e})")]
    Infeasible { residual: f64 },
    #[error("QP reached the iteration limit ({0})")]
    MaxIter(usize),
    #[error("malformed QP: {0}")]
    InvalidProblem(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AllocError {
    #[error("allocation matrix has rank {rank} < 6")]
    DegenerateGeometry { rank: usize },
    #[error("allocation QP infeasible even without downwash rows: {0}")]
    QpInfeasible(QpError),
    #[error("generator {index} thrust {thrust:.2e} N is below the inverse-kinematics floor")]
    IkSingular { index: usize, thrust: f64 },
    #[error("total thrust is zero")]
    ZeroThrust,
    #[error("non-finite allocation input")]
    NonFinite,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("attitude pitch {pitch_deg:.1} deg too close to gimbal lock")]
    AttitudeSingular { pitch_deg: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Allocation(#[from] AllocError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("log is empty")]
    EmptyLog,
}
