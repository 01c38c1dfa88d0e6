//! Rigid-body platform dynamics.
//!
//! Translation is integrated in `F_W`, rotation in `F_B`:
//!
//! ```text
//!     m xi''   = R_WB u_force - m g z + ext_force          (ext_force already in F_W)
//!     J nu'    = u_torque + tau_g - nu x (J nu) + ext_torque
//!     eta'     = E(eta) nu
//! ```
//!
//! Gravity points along `-z` of the world frame. The gimbal joints are kinematic and
//! are advanced by the simulator, not here; the inertia `J` is frozen at the nominal
//! (upright) configuration.

use crate::error::DynamicsError;
use crate::frames::{rotation_body_to_world, AllocationVector, Mat3, PlatformState, Vec3, Wrench, GRAVITY};
use crate::platform::PlatformConfig;

/// Pitch magnitude beyond which the Euler-rate matrix is considered singular [rad].
pub const MAX_PITCH: f64 = 85.0 * std::f64::consts::PI / 180.0;

/// Any state component above this magnitude counts as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsParams {
    /// Total mass [kg].
    pub mass: f64,
    /// Composite inertia about the geometric center [kg m^2].
    pub inertia: Mat3,
    pub inertia_inv: Mat3,
    /// Magnitude of gravitational acceleration [m/s^2].
    pub gravity: f64,
    /// Center-of-mass offset in `F_B` [m].
    pub com_offset: Vec3,
}

impl DynamicsParams {
    /// Total mass and parallel-axis composite inertia of frame plus generators.
    pub fn from_config(cfg: &PlatformConfig) -> Self {
        let mut inertia = Mat3::from_diagonal(&cfg.frame_inertia);
        let module = Mat3::from_diagonal(&cfg.module_inertia);
        for d in &cfg.mount_positions {
            let shift = (Mat3::identity() * d.norm_squared() - d * d.transpose()) * cfg.module_mass;
            inertia += module + shift;
        }
        Self {
            mass: cfg.total_mass(),
            inertia,
            inertia_inv: inertia.try_inverse().expect("composite inertia is positive definite"),
            gravity: GRAVITY,
            com_offset: cfg.com_offset,
        }
    }

    /// Gravity torque about the geometric center, in `F_B`.
    pub fn gravity_torque(&self, attitude: &Vec3) -> Vec3 {
        let r = rotation_body_to_world(attitude);
        let weight_body = r.transpose() * Vec3::new(0.0, 0.0, -self.mass * self.gravity);
        self.com_offset.cross(&weight_body)
    }
}

/// Body wrench produced by thrust generators in configuration `x`.
pub fn actuation_wrench(cfg: &PlatformConfig, x: &AllocationVector) -> Wrench {
    let mut force = Vec3::zeros();
    let mut torque = Vec3::zeros();
    for (i, d) in cfg.mount_positions.iter().enumerate() {
        let f = x.actuator_rotation(i) * Vec3::z() * x.thrust(i);
        force += f;
        torque += d.cross(&f);
    }
    Wrench::new(force, torque)
}

/// Maps body rates to roll-pitch-yaw rates.
pub fn euler_rate_matrix(attitude: &Vec3) -> Result<Mat3, DynamicsError> {
    let (sp, cp) = attitude.x.sin_cos();
    let theta = attitude.y;
    if theta.abs() >= MAX_PITCH {
        return Err(DynamicsError::AttitudeSingular {
            pitch_deg: theta.to_degrees(),
        });
    }
    let (st, ct) = theta.sin_cos();
    let tt = st / ct;
    Ok(Mat3::new(
        1.0,
        sp * tt,
        cp * tt,
        0.0,
        cp,
        -sp,
        0.0,
        sp / ct,
        cp / ct,
    ))
}

/// Inverse of [`euler_rate_matrix`]: roll-pitch-yaw rates to body rates.
pub fn body_rate_matrix(attitude: &Vec3) -> Mat3 {
    let (sp, cp) = attitude.x.sin_cos();
    let (st, ct) = attitude.y.sin_cos();
    Mat3::new(1.0, 0.0, -st, 0.0, cp, sp * ct, 0.0, -sp, cp * ct)
}

#[derive(Debug, Clone, Copy)]
struct Rigid {
    position: Vec3,
    velocity: Vec3,
    attitude: Vec3,
    rates: Vec3,
}

impl Rigid {
    fn axpy(&self, h: f64, d: &Rigid) -> Rigid {
        Rigid {
            position: self.position + d.position * h,
            velocity: self.velocity + d.velocity * h,
            attitude: self.attitude + d.attitude * h,
            rates: self.rates + d.rates * h,
        }
    }
}

fn derivative(params: &DynamicsParams, s: &Rigid, u: &Wrench, ext: &Wrench) -> Result<Rigid, DynamicsError> {
    let r = rotation_body_to_world(&s.attitude);
    let accel = (r * u.force + ext.force) / params.mass - Vec3::new(0.0, 0.0, params.gravity);
    let gyro = s.rates.cross(&(params.inertia * s.rates));
    let torque = u.torque + params.gravity_torque(&s.attitude) - gyro + ext.torque;
    Ok(Rigid {
        position: s.velocity,
        velocity: accel,
        attitude: euler_rate_matrix(&s.attitude)? * s.rates,
        rates: params.inertia_inv * torque,
    })
}

/// Linear acceleration in `F_W` and angular acceleration in `F_B` for the given inputs.
pub fn accelerations(
    params: &DynamicsParams,
    state: &PlatformState,
    u: &Wrench,
    ext_u: &Wrench,
) -> Result<(Vec3, Vec3), DynamicsError> {
    let d = derivative(params, &rigid_of(state), u, ext_u)?;
    Ok((d.velocity, d.rates))
}

fn rigid_of(state: &PlatformState) -> Rigid {
    Rigid {
        position: state.position,
        velocity: state.velocity,
        attitude: state.attitude,
        rates: state.angular_velocity,
    }
}

/// One RK4 step of the rigid-body state with inputs held constant over `dt`.
///
/// `u` is the actuation wrench in `F_B`; `ext_u` carries a world-frame force and a
/// body-frame torque. Actuator fields of the state are copied unchanged.
pub fn step(
    params: &DynamicsParams,
    state: &PlatformState,
    u: &Wrench,
    ext_u: &Wrench,
    dt: f64,
    time: f64,
) -> Result<PlatformState, DynamicsError> {
    if !(dt > 0.0 && dt <= 0.02) {
        return Err(DynamicsError::InvalidStep(dt));
    }
    let s0 = rigid_of(state);
    let k1 = derivative(params, &s0, u, ext_u)?;
    let k2 = derivative(params, &s0.axpy(0.5 * dt, &k1), u, ext_u)?;
    let k3 = derivative(params, &s0.axpy(0.5 * dt, &k2), u, ext_u)?;
    let k4 = derivative(params, &s0.axpy(dt, &k3), u, ext_u)?;
    let h = dt / 6.0;
    let s1 = s0.axpy(h, &k1).axpy(2.0 * h, &k2).axpy(2.0 * h, &k3).axpy(h, &k4);

    let mut next = state.clone();
    next.position = s1.position;
    next.velocity = s1.velocity;
    next.attitude = s1.attitude;
    next.angular_velocity = s1.rates;

    let components = [s1.position, s1.velocity, s1.attitude, s1.rates];
    if let Some(bad) = components
        .iter()
        .flat_map(|v| v.iter())
        .find(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT)
    {
        return Err(DynamicsError::IntegrationDiverged {
            time: time + dt,
            what: format!("state component {bad:e}"),
        });
    }
    Ok(next)
}

/// Angular momentum about the geometric center expressed in `F_W`.
pub fn angular_momentum_world(params: &DynamicsParams, state: &PlatformState) -> Vec3 {
    state.rotation() * (params.inertia * state.angular_velocity)
}
