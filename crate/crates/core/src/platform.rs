//! Platform description: geometry, mass properties and actuator limits.

use std::f64::consts::TAU;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::frames::{AllocationVector, Vec3};

/// Closed interval `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub min: f64,
    pub max: f64,
}

impl Interval {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.min, self.max)
    }
}

/// Per control tick bounds on how far each kind of actuator variable may move.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateLimits {
    /// Max |delta alpha| per allocation tick [rad].
    pub tilt: f64,
    /// Max |delta beta| per allocation tick [rad].
    pub twist: f64,
    /// Max |delta T| per allocation tick [N].
    pub thrust: f64,
}

/// Geometry, mass properties and limits of an `N`-generator platform (SI units).
#[derive(Debug, Clone, PartialEq)]
pub struct PlatformConfig {
    pub n_generators: usize,
    /// Main frame mass `m_0` [kg].
    pub frame_mass: f64,
    /// Mass of one thrust generator `m_i` [kg].
    pub module_mass: f64,
    /// Principal inertia of the main frame [kg m^2].
    pub frame_inertia: Vec3,
    /// Principal inertia of one generator about its own center [kg m^2].
    pub module_inertia: Vec3,
    /// Arm length `l` [m].
    pub arm_length: f64,
    /// Mount positions `d_i` in `F_B` [m].
    pub mount_positions: Vec<Vec3>,
    /// Distance `a` of each propeller from its quadcopter center [m].
    pub prop_offset: f64,
    /// Per-propeller thrust saturation `t_max` [N].
    pub max_prop_thrust: f64,
    /// Propeller thrust constant `K_T` [N s^2].
    pub prop_thrust_const: f64,
    /// Propeller drag constant `K_tau` [N m s^2].
    pub prop_drag_const: f64,
    /// Center-of-mass offset from the geometric center, in `F_B` [m].
    pub com_offset: Vec3,
    pub tilt_limits: Interval,
    pub twist_limits: Interval,
    pub thrust_limits: Interval,
    pub rate_limits: RateLimits,
}

/// kg cm^2 to kg m^2.
pub const KG_CM2: f64 = 1e-4;

/// Regular `n`-gon of radius `l` in the body x-y plane, first vertex on `+x`.
pub fn regular_polygon(n: usize, radius: f64) -> Vec<Vec3> {
    (0..n)
        .map(|i| {
            let angle = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            Vec3::new(radius * angle.cos(), radius * angle.sin(), 0.0)
        })
        .collect()
}

impl PlatformConfig {
    /// Four-generator reference platform.
    pub fn four() -> Self {
        Self::regular(
            4,
            0.020,
            0.050,
            Vec3::new(3.20, 3.20, 4.70),
            Vec3::new(0.35, 0.35, 0.55),
            0.21,
            0.068,
            0.30,
        )
    }

    /// Six-generator reference platform.
    pub fn six() -> Self {
        Self::regular(
            6,
            0.030,
            0.036,
            Vec3::new(4.50, 4.50, 6.20),
            Vec3::new(0.16, 0.16, 0.29),
            0.18,
            0.032,
            0.15,
        )
    }

    /// Regular polygon layout with default propeller constants and limits.
    /// Inertias are given in kg cm^2.
    #[allow(clippy::too_many_arguments)]
    pub fn regular(
        n: usize,
        frame_mass: f64,
        module_mass: f64,
        frame_inertia_kgcm2: Vec3,
        module_inertia_kgcm2: Vec3,
        arm_length: f64,
        prop_offset: f64,
        max_prop_thrust: f64,
    ) -> Self {
        Self {
            n_generators: n,
            frame_mass,
            module_mass,
            frame_inertia: frame_inertia_kgcm2 * KG_CM2,
            module_inertia: module_inertia_kgcm2 * KG_CM2,
            arm_length,
            mount_positions: regular_polygon(n, arm_length),
            prop_offset,
            max_prop_thrust,
            prop_thrust_const: 2.2e-8,
            prop_drag_const: 1.3e-10,
            com_offset: Vec3::zeros(),
            tilt_limits: Interval::new(-TAU, TAU),
            twist_limits: Interval::new(-1.55, 1.55),
            thrust_limits: Interval::new(0.02, 0.9 * 4.0 * max_prop_thrust),
            rate_limits: RateLimits {
                tilt: 0.05,
                twist: 0.05,
                thrust: 0.05,
            },
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.frame_mass + self.n_generators as f64 * self.module_mass
    }

    /// Mixer arm `b = a / sqrt(2)`.
    pub fn mixer_arm(&self) -> f64 {
        self.prop_offset / std::f64::consts::SQRT_2
    }

    /// Yaw-moment coefficient `c_tau = K_tau / K_T` [m].
    pub fn drag_ratio(&self) -> f64 {
        self.prop_drag_const / self.prop_thrust_const
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = self.n_generators;
        if n < 3 {
            return Err(ConfigError::invalid(format!("need at least 3 generators, got {n}")));
        }
        if self.mount_positions.len() != n {
            return Err(ConfigError::invalid(format!(
                "{} mount positions given for {n} generators",
                self.mount_positions.len()
            )));
        }
        let positive = [
            ("frame mass", self.frame_mass),
            ("module mass", self.module_mass),
            ("arm length", self.arm_length),
            ("prop offset", self.prop_offset),
            ("max prop thrust", self.max_prop_thrust),
            ("prop thrust constant", self.prop_thrust_const),
            ("prop drag constant", self.prop_drag_const),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("frame inertia", self.frame_inertia), ("module inertia", self.module_inertia)] {
            if !v.iter().all(|c| *c > 0.0 && c.is_finite()) {
                return Err(ConfigError::invalid(format!("{name} must be positive, got {v:?}")));
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if (self.mount_positions[i] - self.mount_positions[j]).norm() < 1e-9 {
                    return Err(ConfigError::invalid(format!(
                        "mount positions {} and {} coincide",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        for (name, iv) in [
            ("tilt limits", self.tilt_limits),
            ("twist limits", self.twist_limits),
            ("thrust limits", self.thrust_limits),
        ] {
            if !(iv.min <= iv.max) {
                return Err(ConfigError::invalid(format!("{name} are empty: {iv:?}")));
            }
        }
        if self.thrust_limits.min < 0.0 {
            return Err(ConfigError::invalid("thrust lower limit must be non-negative"));
        }
        let r = self.rate_limits;
        if !(r.tilt > 0.0 && r.twist > 0.0 && r.thrust > 0.0) {
            return Err(ConfigError::invalid("rate limits must be positive"));
        }
        Ok(())
    }

    /// Lower box bound `X_min` of the allocation vector.
    pub fn x_min(&self) -> DVector<f64> {
        self.stacked(self.tilt_limits.min, self.twist_limits.min, self.thrust_limits.min)
    }

    /// Upper box bound `X_max` of the allocation vector.
    pub fn x_max(&self) -> DVector<f64> {
        self.stacked(self.tilt_limits.max, self.twist_limits.max, self.thrust_limits.max)
    }

    /// Per-tick rate bound `|delta X| <= dx_max`.
    pub fn dx_max(&self) -> DVector<f64> {
        let r = self.rate_limits;
        self.stacked(r.tilt, r.twist, r.thrust)
    }

    fn stacked(&self, a: f64, b: f64, t: f64) -> DVector<f64> {
        let n = self.n_generators;
        DVector::from_fn(3 * n, |k, _| match k / n {
            0 => a,
            1 => b,
            _ => t,
        })
    }

    /// Whether `x` lies inside the box limits (with an absolute slack `tol`).
    pub fn within_limits(&self, x: &AllocationVector, tol: f64) -> bool {
        let lo = self.x_min();
        let hi = self.x_max();
        x.as_vector()
            .iter()
            .zip(lo.iter().zip(hi.iter()))
            .all(|(v, (l, h))| *v >= l - tol && *v <= h + tol)
    }

    /// Level hover allocation: all generators upright sharing the weight.
    pub fn hover_allocation(&self) -> AllocationVector {
        let t = self.total_mass() * crate::frames::GRAVITY / self.n_generators as f64;
        AllocationVector::level(self.n_generators, t)
    }
}
