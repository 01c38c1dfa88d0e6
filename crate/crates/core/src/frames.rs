//! Frame conventions and the small value types shared by every module.
//!
//! Three frames are used throughout the crate:
//!
//! * `F_W`: world frame, z up, gravity along `-z`.
//! * `F_B`: platform body frame attached to the geometric center of the main frame.
//! * `F_i`: actuator frame of the `i`th thrust generator, mounted at `d_i` in `F_B`.
//!
//! Attitude is a roll-pitch-yaw triple `[phi, theta, psi]` composed as
//! `R = Rz(psi) * Ry(theta) * Rx(phi)` (body to world). Each thrust generator is a
//! quadcopter on a two-axis gimbal: it tilts by `alpha` about its x axis and then
//! twists by `beta` about the resulting y axis, so `R_i = Rx(alpha) * Ry(beta)` and
//! the thrust axis is `R_i * z = [sin b, -sin a cos b, cos a cos b]`.

use nalgebra::{DVector, Matrix3, Vector3, Vector6};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Gravitational acceleration [m/s^2].
pub const GRAVITY: f64 = 9.81;

pub fn rot_x(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Body-to-world rotation for a roll-pitch-yaw attitude `[phi, theta, psi]`.
pub fn rotation_body_to_world(attitude: &Vec3) -> Mat3 {
    rot_z(attitude.z) * rot_y(attitude.y) * rot_x(attitude.x)
}

/// Roll-pitch-yaw angles of a rotation matrix built by [`rotation_body_to_world`].
///
/// Returns `theta` in `[-pi/2, pi/2]`; near the singular pitch the roll/yaw split is arbitrary.
pub fn attitude_from_rotation(r: &Mat3) -> Vec3 {
    let theta = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let phi = r[(2, 1)].atan2(r[(2, 2)]);
    let psi = r[(1, 0)].atan2(r[(0, 0)]);
    Vec3::new(phi, theta, psi)
}

/// Rotation of actuator frame `F_i` relative to `F_B` for tilt `alpha` and twist `beta`.
pub fn actuator_rotation(alpha: f64, beta: f64) -> Mat3 {
    rot_x(alpha) * rot_y(beta)
}

/// Thrust axis `R_i * z` of a generator, written out directly.
pub fn thrust_axis(alpha: f64, beta: f64) -> Vec3 {
    let (sa, ca) = alpha.sin_cos();
    let (sb, cb) = beta.sin_cos();
    Vec3::new(sb, -sa * cb, ca * cb)
}

/// Cross-product matrix: `skew(a) * b == a x b`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut a = angle.rem_euclid(two_pi);
    if a > std::f64::consts::PI {
        a -= two_pi;
    }
    a
}

/// A force/torque pair.
///
/// For commands (`u`, `u^d`) both parts are expressed in `F_B`. The downwash
/// disturbance `ext_u` carries its force already rotated into `F_W` and its torque in `F_B`,
/// matching how each part enters the translational and rotational equations of motion.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Wrench {
    pub force: Vec3,
    pub torque: Vec3,
}

impl Wrench {
    pub fn new(force: Vec3, torque: Vec3) -> Self {
        Self { force, torque }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.force.x,
            self.force.y,
            self.force.z,
            self.torque.x,
            self.torque.y,
            self.torque.z,
        )
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            force: Vec3::new(v[0], v[1], v[2]),
            torque: Vec3::new(v[3], v[4], v[5]),
        }
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn is_finite(&self) -> bool {
        self.force.iter().chain(self.torque.iter()).all(|v| v.is_finite())
    }
}

impl std::ops::Add for Wrench {
    type Output = Wrench;

    fn add(self, rhs: Wrench) -> Wrench {
        Wrench::new(self.force + rhs.force, self.torque + rhs.torque)
    }
}

/// Stacked actuator state `X = [alpha; beta; T]` of length `3N`.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationVector(DVector<f64>);

impl AllocationVector {
    pub fn from_parts(alpha: &[f64], beta: &[f64], thrust: &[f64]) -> Self {
        let n = alpha.len();
        assert!(beta.len() == n && thrust.len() == n, "mismatched part lengths");
        let mut v = DVector::zeros(3 * n);
        for i in 0..n {
            v[i] = alpha[i];
            v[n + i] = beta[i];
            v[2 * n + i] = thrust[i];
        }
        Self(v)
    }

    /// All generators upright with the same thrust.
    pub fn level(n: usize, thrust: f64) -> Self {
        Self::from_parts(&vec![0.0; n], &vec![0.0; n], &vec![thrust; n])
    }

    pub fn from_vector(v: DVector<f64>) -> Self {
        assert!(v.len() % 3 == 0, "allocation vector length must be a multiple of 3");
        Self(v)
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }

    pub fn n_generators(&self) -> usize {
        self.0.len() / 3
    }

    pub fn alpha(&self, i: usize) -> f64 {
        self.0[i]
    }

    pub fn beta(&self, i: usize) -> f64 {
        self.0[self.n_generators() + i]
    }

    pub fn thrust(&self, i: usize) -> f64 {
        self.0[2 * self.n_generators() + i]
    }

    pub fn set(&mut self, i: usize, alpha: f64, beta: f64, thrust: f64) {
        let n = self.n_generators();
        self.0[i] = alpha;
        self.0[n + i] = beta;
        self.0[2 * n + i] = thrust;
    }

    pub fn thrust_axis(&self, i: usize) -> Vec3 {
        thrust_axis(self.alpha(i), self.beta(i))
    }

    pub fn actuator_rotation(&self, i: usize) -> Mat3 {
        actuator_rotation(self.alpha(i), self.beta(i))
    }

    pub fn total_thrust(&self) -> f64 {
        (0..self.n_generators()).map(|i| self.thrust(i)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Full rigid-body state of the platform plus the gimbal states of every generator.
#[derive(Debug, Clone, PartialEq)]
pub struct PlatformState {
    /// Position of the main-frame center in `F_W` [m].
    pub position: Vec3,
    /// Roll-pitch-yaw attitude [rad].
    pub attitude: Vec3,
    /// Linear velocity in `F_W` [m/s].
    pub velocity: Vec3,
    /// Angular velocity in `F_B` [rad/s].
    pub angular_velocity: Vec3,
    /// Gimbal angles and thrust magnitudes actually realized by the generators.
    pub actuators: AllocationVector,
    /// Gimbal angle rates `[alpha_dot; beta_dot]`, length `2N` [rad/s].
    pub gimbal_rates: DVector<f64>,
}

impl PlatformState {
    pub fn at_rest(position: Vec3, actuators: AllocationVector) -> Self {
        let n = actuators.n_generators();
        Self {
            position,
            attitude: Vec3::zeros(),
            velocity: Vec3::zeros(),
            angular_velocity: Vec3::zeros(),
            actuators,
            gimbal_rates: DVector::zeros(2 * n),
        }
    }

    pub fn rotation(&self) -> Mat3 {
        rotation_body_to_world(&self.attitude)
    }
}
