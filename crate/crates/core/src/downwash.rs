//! Downwash aerodynamics and the geometric avoidance constraint.
//!
//! The wake of each quadcopter module is a Gaussian jet (zone of flow establishment)
//! leaving the module against its thrust axis. Propellers of other modules sitting in
//! that jet lose thrust in proportion to the local axial velocity. The allocation side
//! only needs geometry: for every ordered pair `(i, j)` the squared radial distance
//! `O_ij^2` between the thrust axis of module `i` and the center of module `j`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::control::QuadMixer;
use crate::error::DownwashError;
use crate::frames::{rotation_body_to_world, AllocationVector, Vec3, Wrench};
use crate::platform::PlatformConfig;

/// Air density used for momentum-theory induced velocity [kg/m^3].
pub const AIR_DENSITY: f64 = 1.225;

/// Length of the jet region where the model is applied, in efflux radii.
pub const ZFE_LENGTH_RADII: f64 = 20.0;

/// Constants of the Gaussian wake model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownwashModel {
    /// Viscosity constant `K_visc`.
    pub k_visc: f64,
    /// Efflux plane position `z_0` [m].
    pub z0_m: f64,
    /// Contracted radius of the efflux plane `R_0` [m].
    pub r0_m: f64,
    /// Induced velocity at the efflux plane `V_0` [m/s].
    pub v0_m_per_s: f64,
    /// Radial location of the velocity peak `R_m0` [m].
    pub rm0_m: f64,
    /// Decay constant `c_1`.
    pub c1: f64,
    /// Decay constant `c_2`.
    pub c2: f64,
    /// Thrust decay coefficient `b_v` [s/m].
    pub b_v_s_per_m: f64,
}

impl Default for DownwashModel {
    fn default() -> Self {
        Self {
            k_visc: 4.5,
            z0_m: 0.0,
            r0_m: 0.023,
            v0_m_per_s: 5.0,
            rm0_m: 0.7 * 0.023,
            c1: 1.0,
            c2: 0.01,
            b_v_s_per_m: 0.3,
        }
    }
}

impl DownwashModel {
    /// Induced velocity from momentum theory, `V_0 = sqrt(t / (2 rho A))`, for a rotor of
    /// radius `radius` producing thrust `thrust`.
    pub fn momentum_velocity(thrust: f64, radius: f64) -> f64 {
        let area = std::f64::consts::PI * radius * radius;
        (thrust.max(0.0) / (2.0 * AIR_DENSITY * area)).sqrt()
    }

    /// Same model with the jet turned off.
    pub fn disabled(mut self) -> Self {
        self.b_v_s_per_m = 0.0;
        self
    }

    pub fn validate(&self) -> Result<(), DownwashError> {
        let checks = [
            (self.r0_m > 0.0, "R_0 must be positive"),
            (self.v0_m_per_s >= 0.0, "V_0 must be non-negative"),
            (self.b_v_s_per_m >= 0.0, "b_v must be non-negative"),
            (self.c1 > 0.0, "c_1 must be positive"),
            (self.k_visc > 0.0, "K_visc must be positive"),
            (self.rm0_m >= 0.0, "R_m0 must be non-negative"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(DownwashError::InvalidModel(msg.to_string()));
            }
        }
        let all = [
            self.k_visc,
            self.z0_m,
            self.r0_m,
            self.v0_m_per_s,
            self.rm0_m,
            self.c1,
            self.c2,
            self.b_v_s_per_m,
        ];
        if !all.iter().all(|v| v.is_finite()) {
            return Err(DownwashError::InvalidModel("non-finite constant".into()));
        }
        Ok(())
    }

    /// Axial extent of the modeled jet beyond the efflux plane [m].
    pub fn zfe_length(&self) -> f64 {
        ZFE_LENGTH_RADII * self.r0_m
    }

    /// Centerline peak velocity `V_ZFE,max(z)`, clamped at zero.
    pub fn peak_velocity(&self, z: f64) -> f64 {
        let v = self.v0_m_per_s * (self.c1 - self.c2 * self.k_visc * (z - self.z0_m) / self.r0_m);
        v.max(0.0)
    }

    /// Gaussian width of the radial profile at axial distance `z`.
    pub fn width(&self, z: f64) -> f64 {
        0.5 * self.rm0_m + 0.075 * (z - self.z0_m - self.r0_m) / self.k_visc
    }

    /// Axial wake velocity at axial distance `z` downstream and radial distance `r`.
    pub fn axial_velocity(&self, z: f64, r: f64) -> Result<f64, DownwashError> {
        if !(z > self.z0_m) {
            return Err(DownwashError::InvalidGeometry { z, z0: self.z0_m });
        }
        if z - self.z0_m > self.zfe_length() {
            return Ok(0.0);
        }
        let peak = self.peak_velocity(z);
        if peak == 0.0 {
            return Ok(0.0);
        }
        let sigma = self.width(z);
        if !(sigma > 0.0) {
            return Ok(if r == self.rm0_m { peak } else { 0.0 });
        }
        let e = (r - self.rm0_m) / sigma;
        Ok(peak * (-0.5 * e * e).exp())
    }

    /// Like [`Self::axial_velocity`] but zero outside the modeled region.
    pub fn velocity_or_zero(&self, z: f64, r: f64) -> f64 {
        self.axial_velocity(z, r).unwrap_or(0.0)
    }
}

/// Propeller hub positions in the module frame, in mixer column order.
///
/// Read off the mixer rows: roll moment `sum y_j t_j`, pitch moment `-sum x_j t_j`.
pub fn prop_layout(b: f64) -> [Vec3; 4] {
    [
        Vec3::new(b, b, 0.0),
        Vec3::new(b, -b, 0.0),
        Vec3::new(-b, -b, 0.0),
        Vec3::new(-b, b, 0.0),
    ]
}

/// Axial (downstream) and radial distance of `point` from the wake of a module centered at
/// `center` with thrust axis `axis`. Everything in `F_B`.
pub fn wake_coordinates(point: &Vec3, center: &Vec3, axis: &Vec3) -> (f64, f64) {
    let v = point - center;
    let along = v.dot(axis);
    let radial = (v - axis * along).norm();
    (-along, radial)
}

/// Per-propeller thrust changes `dt[i][j] <= 0` caused by the wakes of all other modules.
///
/// `x` supplies the current gimbal angles; `prop_thrusts[i][j]` the thrust of propeller `j`
/// of module `i`. Decrements are clamped so that no propeller thrust goes negative.
pub fn thrust_decrements(
    cfg: &PlatformConfig,
    model: &DownwashModel,
    x: &AllocationVector,
    prop_thrusts: &[[f64; 4]],
) -> Vec<[f64; 4]> {
    let n = cfg.n_generators;
    let mut out = vec![[0.0; 4]; n];
    if model.b_v_s_per_m == 0.0 || model.v0_m_per_s == 0.0 {
        return out;
    }
    let layout = prop_layout(cfg.mixer_arm());
    let axes: Vec<Vec3> = (0..n).map(|k| x.thrust_axis(k)).collect();
    for i in 0..n {
        let rot = x.actuator_rotation(i);
        for (j, hub) in layout.iter().enumerate() {
            let point = cfg.mount_positions[i] + rot * hub;
            let mut velocity = 0.0;
            for k in (0..n).filter(|&k| k != i) {
                let (z, r) = wake_coordinates(&point, &cfg.mount_positions[k], &axes[k]);
                velocity += model.velocity_or_zero(z, r);
            }
            let t = prop_thrusts[i][j].max(0.0);
            out[i][j] = (-model.b_v_s_per_m * velocity * t).max(-t);
        }
    }
    out
}

/// Disturbance produced by per-propeller thrust decrements.
#[derive(Debug, Clone, PartialEq)]
pub struct Disturbance {
    /// `ext_u`: force in `F_W`, torque in `F_B`.
    pub wrench: Wrench,
    /// Thrust change of each module `Delta T_i`.
    pub thrust: Vec<f64>,
    /// Module torque change `Delta M_i` in each actuator frame.
    pub moments: Vec<Vec3>,
}

/// Aggregates per-propeller decrements into module thrust/torque changes and the
/// platform-level disturbance wrench.
pub fn disturbance_wrench(
    cfg: &PlatformConfig,
    decrements: &[[f64; 4]],
    attitude: &Vec3,
    x: &AllocationVector,
) -> Disturbance {
    let mixer = QuadMixer::from_config(cfg);
    let mut body_force = Vec3::zeros();
    let mut torque = Vec3::zeros();
    let mut thrust = Vec::with_capacity(decrements.len());
    let mut moments = Vec::with_capacity(decrements.len());
    for (i, dt) in decrements.iter().enumerate() {
        let (dthrust, dm) = mixer.forward(dt);
        let f = x.thrust_axis(i) * dthrust;
        body_force += f;
        torque += cfg.mount_positions[i].cross(&f);
        thrust.push(dthrust);
        moments.push(dm);
    }
    Disturbance {
        wrench: Wrench::new(rotation_body_to_world(attitude) * body_force, torque),
        thrust,
        moments,
    }
}

/// Ordered pairs `(i, j)`, `i != j`, in the stacking order of the constraint vector.
pub fn ordered_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
}

/// Row of pair `(i, j)` in the constraint vector.
pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
    assert!(i != j && i < n && j < n);
    i * (n - 1) + if j < i { j } else { j - 1 }
}

/// Signed projection of `d_j - d_i` on the flow direction `-R_i z` of module `i`.
/// Positive when module `j` lies downstream of module `i`.
pub fn projection(cfg: &PlatformConfig, x: &AllocationVector, i: usize, j: usize) -> f64 {
    -(cfg.mount_positions[j] - cfg.mount_positions[i]).dot(&x.thrust_axis(i))
}

/// Squared radial distances `O_ij^2` for all ordered pairs [m^2].
pub fn constraint_vector(cfg: &PlatformConfig, x: &AllocationVector) -> DVector<f64> {
    let n = cfg.n_generators;
    let values: Vec<f64> = ordered_pairs(n)
        .map(|(i, j)| {
            let dij = cfg.mount_positions[j] - cfg.mount_positions[i];
            let proj = dij.dot(&x.thrust_axis(i));
            (dij.norm_squared() - proj * proj).max(0.0)
        })
        .collect();
    DVector::from_vec(values)
}

/// Lower bounds on the constraint vector: `o_min^2` for pairs where the wake of `i`
/// travels towards `j`, zero otherwise.
pub fn constraint_bound(cfg: &PlatformConfig, x: &AllocationVector, o_min: f64) -> DVector<f64> {
    let n = cfg.n_generators;
    let bound = o_min * o_min;
    let values: Vec<f64> = ordered_pairs(n)
        .map(|(i, j)| if projection(cfg, x, i, j) <= 0.0 { 0.0 } else { bound })
        .collect();
    DVector::from_vec(values)
}

/// Jacobian of [`constraint_vector`] with respect to `X = [alpha; beta; T]`.
///
/// Row `(i, j)` only touches `alpha_i` and `beta_i`; thrust columns are identically zero.
pub fn constraint_jacobian(cfg: &PlatformConfig, x: &AllocationVector) -> DMatrix<f64> {
    let n = cfg.n_generators;
    let mut jac = DMatrix::zeros(n * (n - 1), 3 * n);
    for (row, (i, j)) in ordered_pairs(n).enumerate() {
        let dij = cfg.mount_positions[j] - cfg.mount_positions[i];
        let (sa, ca) = x.alpha(i).sin_cos();
        let (sb, cb) = x.beta(i).sin_cos();
        let axis = Vec3::new(sb, -sa * cb, ca * cb);
        let d_alpha = Vec3::new(0.0, -ca * cb, -sa * cb);
        let d_beta = Vec3::new(cb, sa * sb, -ca * sb);
        let proj = dij.dot(&axis);
        jac[(row, i)] = -2.0 * proj * dij.dot(&d_alpha);
        jac[(row, n + i)] = -2.0 * proj * dij.dot(&d_beta);
    }
    jac
}
