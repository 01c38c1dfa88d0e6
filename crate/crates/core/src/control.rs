//! Hierarchical controller.
//!
//! The high level runs feedback linearization on the rigid body so that position and
//! attitude each become a double integrator closed by PD feedback. The low level tracks the
//! commanded gimbal angles with PID loops, maps the resulting joint accelerations to module
//! torques and distributes thrust and torque over the four propellers of each module.

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsParams, MAX_PITCH};
use crate::error::ControlError;
use crate::frames::{rotation_body_to_world, Mat3, PlatformState, Vec3, Wrench};
use crate::platform::PlatformConfig;

/// PD gains of the two double-integrator loops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackingGains {
    pub kp_position: Vec3,
    pub kd_position: Vec3,
    pub kp_attitude: Vec3,
    pub kd_attitude: Vec3,
}

impl TrackingGains {
    /// Critically damped gains with natural frequencies `w_pos` and `w_att` [rad/s].
    pub fn critically_damped(w_pos: f64, w_att: f64) -> Self {
        Self {
            kp_position: Vec3::repeat(w_pos * w_pos),
            kd_position: Vec3::repeat(2.0 * w_pos),
            kp_attitude: Vec3::repeat(w_att * w_att),
            kd_attitude: Vec3::repeat(2.0 * w_att),
        }
    }

    /// Gains must be strictly positive, which puts both poles of every loop in the open left half plane.
    pub fn is_valid(&self) -> bool {
        [self.kp_position, self.kd_position, self.kp_attitude, self.kd_attitude]
            .iter()
            .flat_map(|v| v.iter())
            .all(|g| g.is_finite() && *g > 0.0)
    }
}

impl Default for TrackingGains {
    fn default() -> Self {
        Self::critically_damped(3.0, 12.0)
    }
}

/// One sample of the reference trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceSample {
    pub position: Vec3,
    pub velocity: Vec3,
    pub acceleration: Vec3,
    pub attitude: Vec3,
    /// Reference body rate in the reference body frame [rad/s].
    pub body_rate: Vec3,
    pub body_accel: Vec3,
}

impl ReferenceSample {
    /// Fixed pose with zero derivatives.
    pub fn stationary(position: Vec3, attitude: Vec3) -> Self {
        Self {
            position,
            velocity: Vec3::zeros(),
            acceleration: Vec3::zeros(),
            attitude,
            body_rate: Vec3::zeros(),
            body_accel: Vec3::zeros(),
        }
    }
}

fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Attitude error of `r` relative to `r_ref`, `0.5 vee(R_ref^T R - R^T R_ref)`.
pub fn attitude_error(r: &Mat3, r_ref: &Mat3) -> Vec3 {
    0.5 * vee(&(r_ref.transpose() * r - r.transpose() * r_ref))
}

/// Virtual inputs `(u_xi, u_nu)` of the linearized plant.
pub fn virtual_inputs(reference: &ReferenceSample, state: &PlatformState, gains: &TrackingGains) -> (Vec3, Vec3) {
    let u_xi = reference.acceleration
        + gains.kp_position.component_mul(&(reference.position - state.position))
        + gains.kd_position.component_mul(&(reference.velocity - state.velocity));
    let r = state.rotation();
    let r_ref = rotation_body_to_world(&reference.attitude);
    let e_r = attitude_error(&r, &r_ref);
    let rel = r.transpose() * r_ref;
    let rate_ref = rel * reference.body_rate;
    let u_nu = rel * reference.body_accel - gains.kp_attitude.component_mul(&e_r)
        + gains.kd_attitude.component_mul(&(rate_ref - state.angular_velocity));
    (u_xi, u_nu)
}

/// Inverts the rigid-body model for given virtual inputs: the returned body wrench produces
/// `xi'' = u_xi` and `nu' = u_nu` in the disturbance-free plant.
pub fn linearizing_wrench(state: &PlatformState, params: &DynamicsParams, u_xi: &Vec3, u_nu: &Vec3) -> Wrench {
    let r = state.rotation();
    let force = params.mass * r.transpose() * (u_xi + Vec3::new(0.0, 0.0, params.gravity));
    let nu = state.angular_velocity;
    let torque = params.inertia * u_nu + nu.cross(&(params.inertia * nu)) - params.gravity_torque(&state.attitude);
    Wrench::new(force, torque)
}

/// Desired body wrench `u^d`.
pub fn high_level(
    reference: &ReferenceSample,
    state: &PlatformState,
    gains: &TrackingGains,
    params: &DynamicsParams,
) -> Result<Wrench, ControlError> {
    if state.attitude.y.abs() >= MAX_PITCH {
        return Err(ControlError::AttitudeSingular {
            pitch_deg: state.attitude.y.to_degrees(),
        });
    }
    let (u_xi, u_nu) = virtual_inputs(reference, state, gains);
    Ok(linearizing_wrench(state, params, &u_xi, &u_nu))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GimbalPidGains {
    pub kp_alpha: f64,
    pub ki_alpha: f64,
    pub kd_alpha: f64,
    pub kp_beta: f64,
    pub ki_beta: f64,
    pub kd_beta: f64,
    /// Bound on the magnitude of each error integral [rad s].
    #[serde(default = "default_integral_limit")]
    pub integral_limit: f64,
    /// Time constant of the derivative low-pass; zero disables it [s].
    #[serde(default)]
    pub derivative_tau: f64,
}

fn default_integral_limit() -> f64 {
    0.5
}

impl GimbalPidGains {
    pub fn is_valid(&self) -> bool {
        [
            self.kp_alpha,
            self.ki_alpha,
            self.kd_alpha,
            self.kp_beta,
            self.ki_beta,
            self.kd_beta,
            self.integral_limit,
            self.derivative_tau,
        ]
        .iter()
        .all(|g| g.is_finite() && *g >= 0.0)
    }
}

impl Default for GimbalPidGains {
    fn default() -> Self {
        Self {
            kp_alpha: 1600.0,
            ki_alpha: 0.0,
            kd_alpha: 80.0,
            kp_beta: 1600.0,
            ki_beta: 0.0,
            kd_beta: 80.0,
            integral_limit: default_integral_limit(),
            derivative_tau: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct PidChannel {
    integral: f64,
    previous: Option<f64>,
    derivative: f64,
}

impl PidChannel {
    fn update(&mut self, error: f64, dt: f64, kp: f64, ki: f64, kd: f64, limit: f64, tau: f64) -> f64 {
        self.integral = (self.integral + error * dt).clamp(-limit, limit);
        let raw = match self.previous {
            Some(prev) => (error - prev) / dt,
            None => 0.0,
        };
        self.derivative = if tau > 0.0 && self.previous.is_some() {
            self.derivative + dt / (tau + dt) * (raw - self.derivative)
        } else {
            raw
        };
        self.previous = Some(error);
        kp * error + ki * self.integral + kd * self.derivative
    }
}

/// Independent PID loops on the tilt and twist angle of every generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GimbalPid {
    alpha: Vec<PidChannel>,
    beta: Vec<PidChannel>,
}

impl GimbalPid {
    pub fn new(n: usize) -> Self {
        Self {
            alpha: vec![PidChannel::default(); n],
            beta: vec![PidChannel::default(); n],
        }
    }

    /// Commanded joint accelerations `(alpha'', beta'')` from angle errors.
    pub fn update(&mut self, e_alpha: &[f64], e_beta: &[f64], dt: f64, gains: &GimbalPidGains) -> (Vec<f64>, Vec<f64>) {
        let g = gains;
        let a = self
            .alpha
            .iter_mut()
            .zip(e_alpha)
            .map(|(c, e)| c.update(*e, dt, g.kp_alpha, g.ki_alpha, g.kd_alpha, g.integral_limit, g.derivative_tau))
            .collect();
        let b = self
            .beta
            .iter_mut()
            .zip(e_beta)
            .map(|(c, e)| c.update(*e, dt, g.kp_beta, g.ki_beta, g.kd_beta, g.integral_limit, g.derivative_tau))
            .collect();
        (a, b)
    }
}

/// Module torque realizing joint accelerations through a gimbal with twist `beta`.
pub fn joint_torques(alpha_dd: f64, beta_dd: f64, beta: f64, module_inertia: &Vec3) -> Vec3 {
    let (sb, cb) = beta.sin_cos();
    let jx = module_inertia.x * alpha_dd;
    Vec3::new(jx * cb, module_inertia.y * beta_dd, jx * sb)
}

/// Joint accelerations produced by a module torque; left inverse of [`joint_torques`].
pub fn joint_accelerations(torque: &Vec3, beta: f64, module_inertia: &Vec3) -> (f64, f64) {
    let (sb, cb) = beta.sin_cos();
    ((torque.x * cb + torque.z * sb) / module_inertia.x, torque.y / module_inertia.y)
}

/// Per-module propeller thrusts after mixing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixOutput {
    pub thrusts: [f64; 4],
    /// Propeller speeds [rad/s].
    pub omegas: [f64; 4],
    pub saturated: bool,
}

/// Maps the four propeller thrusts of a module to `[T; M^x; M^y; M^z]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadMixer {
    pub matrix: Matrix4<f64>,
    pub inverse: Matrix4<f64>,
    pub thrust_const: f64,
}

impl QuadMixer {
    pub fn new(b: f64, c_tau: f64, thrust_const: f64) -> Self {
        #[rustfmt::skip]
        let matrix = Matrix4::new(
            1.0, 1.0, 1.0, 1.0,
            b, -b, -b, b,
            -b, -b, b, b,
            -c_tau, c_tau, -c_tau, c_tau,
        );
        let inverse = matrix.try_inverse().expect("mixer needs b and c_tau nonzero");
        Self {
            matrix,
            inverse,
            thrust_const,
        }
    }

    pub fn from_config(cfg: &PlatformConfig) -> Self {
        Self::new(cfg.mixer_arm(), cfg.drag_ratio(), cfg.prop_thrust_const)
    }

    /// Thrust and torque of one module from its propeller thrusts.
    pub fn forward(&self, t: &[f64; 4]) -> (f64, Vec3) {
        let v = self.matrix * nalgebra::Vector4::from_column_slice(t);
        (v[0], Vec3::new(v[1], v[2], v[3]))
    }

    /// Unclamped propeller thrusts for a module thrust and torque.
    pub fn inverse(&self, thrust: f64, torque: &Vec3) -> [f64; 4] {
        let v = self.inverse * nalgebra::Vector4::new(thrust, torque.x, torque.y, torque.z);
        [v[0], v[1], v[2], v[3]]
    }

    /// Propeller speed for thrust `t`.
    pub fn omega(&self, t: f64) -> f64 {
        (t.max(0.0) / self.thrust_const).sqrt()
    }

    /// Propeller thrusts within `[0, t_max]` and the corresponding speeds.
    ///
    /// When the request does not fit, the torque part is scaled down first so that the
    /// module thrust is kept; whatever still exceeds the limits is clamped.
    pub fn mix(&self, thrust: f64, torque: &Vec3, t_max: f64) -> MixOutput {
        let raw = self.inverse(thrust, torque);
        let base = self.inverse(thrust, &Vec3::zeros());
        let mut scale: f64 = 1.0;
        for (b, r) in base.iter().zip(&raw) {
            let d = r - b;
            if *r > t_max && d > 0.0 {
                scale = scale.min(((t_max - b) / d).max(0.0));
            } else if *r < 0.0 && d < 0.0 {
                scale = scale.min((b / -d).max(0.0));
            }
        }
        let mut saturated = scale < 1.0;
        let mut thrusts = [0.0; 4];
        for ((t, b), r) in thrusts.iter_mut().zip(base).zip(raw) {
            let wanted = if scale < 1.0 { b + scale * (r - b) } else { r };
            *t = wanted.clamp(0.0, t_max);
            saturated |= *t != wanted;
        }
        if saturated {
            log::debug!("propeller saturation: requested {raw:?}, limit {t_max}");
        }
        MixOutput {
            thrusts,
            omegas: thrusts.map(|t| self.omega(t)),
            saturated,
        }
    }
}
