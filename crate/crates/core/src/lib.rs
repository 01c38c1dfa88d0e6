//! Downwash-aware control allocation for over-actuated multirotors built from
//! tiltable 3-DoF thrust generators (quadcopters on two-axis gimbals).
//!
//! - [`frames`]: frame conventions, rotations, wrench and allocation-vector types
//! - [`platform`]: platform geometry, mass properties and actuator limits
//! - [`dynamics`]: rigid-body equations of motion and RK4 integration
//! - [`downwash`]: wake velocity field, thrust decay and the avoidance constraint
//! - [`qp`]: dense active-set QP kernel
//! - [`allocation`]: nullspace QP allocator with downwash rows and thrust-sum penalty
//! - [`control`]: feedback-linearizing tracker, gimbal PID, torque mapping and mixer
//! - [`sim`]: multi-rate closed-loop scenario runner, logs and metrics
//! - [`config`]: TOML schema for platform and scenario files

pub mod allocation;
pub mod config;
pub mod control;
pub mod downwash;
pub mod dynamics;
pub mod error;
pub mod frames;
pub mod platform;
pub mod qp;
pub mod sim;

pub use error::{AllocError, ConfigError, ControlError, DownwashError, DynamicsError, QpError, SimError};
pub use frames::{AllocationVector, PlatformState, Vec3, Wrench, GRAVITY};
pub use platform::PlatformConfig;
