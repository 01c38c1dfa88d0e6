//! Closed-loop scenario runner.
//!
//! Physics runs at 1 kHz with RK4. Every 10th tick the high-level controller and the
//! allocator run (100 Hz); their output enters a fixed-latency queue. Every 2nd tick the
//! low-level loop (500 Hz) reads the newest released command, runs the gimbal PIDs and the
//! mixers. Downwash is evaluated on every physics tick from the realized gimbal angles and
//! propeller thrusts.

use std::collections::VecDeque;
use std::io::{self, Write};

use nalgebra::{DVector, UnitQuaternion, Unit};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::allocation::{Allocator, AllocatorMode, AllocatorWeights, Relaxation};
use crate::control::{
    high_level, joint_accelerations, joint_torques, GimbalPid, GimbalPidGains, QuadMixer, ReferenceSample,
    TrackingGains,
};
use crate::downwash::{constraint_bound, constraint_vector, disturbance_wrench, thrust_decrements, DownwashModel};
use crate::dynamics::{actuation_wrench, step, DynamicsParams, MAX_PITCH};
use crate::error::{ConfigError, DynamicsError, SimError};
use crate::frames::{attitude_from_rotation, rotation_body_to_world, AllocationVector, Mat3, PlatformState, Vec3, Wrench};
use crate::platform::PlatformConfig;
use crate::qp::{QpOptions, QpStatus};

/// Physics step [s].
pub const PHYSICS_DT: f64 = 1e-3;
/// Physics ticks per high-level/allocation tick (100 Hz).
pub const HIGH_LEVEL_DIVIDER: u64 = 10;
/// Physics ticks per low-level tick (500 Hz).
pub const LOW_LEVEL_DIVIDER: u64 = 2;
/// Version tag written at the top of every CSV log.
pub const LOG_SCHEMA: &str = "dwa-log v1";

/// Tolerance on `O^2` below which a gated pair counts as violated [m^2].
pub const VIOLATION_TOL: f64 = 1e-6;

/// Quintic smoothstep and its first two derivatives with respect to `tau`.
fn smoothstep(tau: f64) -> (f64, f64, f64) {
    let t = tau.clamp(0.0, 1.0);
    if tau <= 0.0 || tau >= 1.0 {
        return (t, 0.0, 0.0);
    }
    let t2 = t * t;
    let t3 = t2 * t;
    (
        t3 * (10.0 - 15.0 * t + 6.0 * t2),
        30.0 * t2 * (1.0 - 2.0 * t + t2),
        60.0 * t * (1.0 - 3.0 * t + 2.0 * t2),
    )
}

/// Smooth rotation about `axis` from the level pose towards angle `to` over `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleSegment {
    pub start: f64,
    pub end: f64,
    pub axis: Unit<Vec3>,
    /// Target rotation angle [rad].
    pub to: f64,
}

/// Smooth transition of the reference position towards `to` over `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoveSegment {
    pub start: f64,
    pub end: f64,
    pub to: Vec3,
}

/// Reference: a position profile plus rotations from the level pose.
///
/// Consecutive rotation segments may only change axis while the attitude is level.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub initial_position: Vec3,
    pub rotations: Vec<AngleSegment>,
    pub moves: Vec<MoveSegment>,
}

impl Trajectory {
    pub fn hover(position: Vec3) -> Self {
        Self {
            initial_position: position,
            rotations: Vec::new(),
            moves: Vec::new(),
        }
    }

    /// Current rotation axis, angle about it and the angle's first two time derivatives.
    pub fn angle(&self, t: f64) -> (Unit<Vec3>, f64, f64, f64) {
        let mut axis = Vec3::z_axis();
        let mut angle = 0.0;
        for seg in &self.rotations {
            if t < seg.start {
                break;
            }
            axis = seg.axis;
            let span = seg.end - seg.start;
            let (s, ds, dds) = smoothstep((t - seg.start) / span);
            let delta = seg.to - angle;
            if t < seg.end {
                return (axis, angle + delta * s, delta * ds / span, delta * dds / (span * span));
            }
            angle = seg.to;
        }
        (axis, angle, 0.0, 0.0)
    }

    fn position(&self, t: f64) -> (Vec3, Vec3, Vec3) {
        let mut p = self.initial_position;
        for seg in &self.moves {
            if t < seg.start {
                break;
            }
            let span = seg.end - seg.start;
            let (s, ds, dds) = smoothstep((t - seg.start) / span);
            let delta = seg.to - p;
            if t < seg.end {
                return (p + delta * s, delta * (ds / span), delta * (dds / (span * span)));
            }
            p = seg.to;
        }
        (p, Vec3::zeros(), Vec3::zeros())
    }

    pub fn rotation(&self, t: f64) -> Mat3 {
        let (axis, angle, _, _) = self.angle(t);
        UnitQuaternion::from_axis_angle(&axis, angle).to_rotation_matrix().into_inner()
    }

    pub fn sample(&self, t: f64) -> ReferenceSample {
        let (position, velocity, acceleration) = self.position(t);
        let (axis, _, rate, accel) = self.angle(t);
        // A rotation about a fixed axis has the same axis in the body frame.
        ReferenceSample {
            position,
            velocity,
            acceleration,
            attitude: attitude_from_rotation(&self.rotation(t)),
            body_rate: axis.into_inner() * rate,
            body_accel: axis.into_inner() * accel,
        }
    }

    pub fn validate(&self, duration: f64) -> Result<(), ConfigError> {
        for (what, spans) in [
            ("rotation", self.rotations.iter().map(|s| (s.start, s.end)).collect::<Vec<_>>()),
            ("move", self.moves.iter().map(|s| (s.start, s.end)).collect()),
        ] {
            let mut last_end = f64::NEG_INFINITY;
            for (start, end) in spans {
                if !(start.is_finite() && end > start) {
                    return Err(ConfigError::invalid(format!("{what} segment [{start}, {end}] is empty")));
                }
                if start < last_end {
                    return Err(ConfigError::invalid(format!("{what} segments overlap at t = {start}")));
                }
                last_end = end;
            }
        }
        for pair in self.rotations.windows(2) {
            if pair[0].axis != pair[1].axis && pair[0].to != 0.0 {
                return Err(ConfigError::invalid(format!(
                    "rotation axis changes at t = {} while the attitude is not level",
                    pair[1].start
                )));
            }
        }
        let steps = (duration / 0.01).ceil() as usize;
        for k in 0..=steps {
            let t = k as f64 * 0.01;
            let theta = self.sample(t).attitude.y;
            if theta.abs() >= MAX_PITCH {
                return Err(ConfigError::invalid(format!(
                    "reference pitch {:.1} deg at t = {t:.2} s is inside the singular band",
                    theta.to_degrees()
                )));
            }
        }
        Ok(())
    }
}

/// Standard deviations of zero-mean Gaussian measurement noise.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSettings {
    #[serde(default)]
    pub position_m: f64,
    #[serde(default)]
    pub velocity_m_per_s: f64,
    #[serde(default)]
    pub attitude_rad: f64,
    #[serde(default)]
    pub rate_rad_per_s: f64,
}

/// Allocator weights as scalar multiples of the identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocatorSettings {
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub gamma: f64,
    /// Minimum wake clearance `o_min` [m].
    pub o_min_m: f64,
    /// Extra clearance the QP asks for on top of `o_min` to absorb linearization error [m].
    pub clearance_margin_m: f64,
    pub max_iter: usize,
}

impl Default for AllocatorSettings {
    fn default() -> Self {
        Self {
            q1: 1.0,
            q2: 1e4,
            q3: 1e-2,
            gamma: 0.1,
            o_min_m: 0.07,
            clearance_margin_m: 0.005,
            max_iter: 1000,
        }
    }
}

impl AllocatorSettings {
    /// Weights handed to the QP. The clearance margin only applies when avoidance is on.
    pub fn weights(&self, n: usize) -> AllocatorWeights {
        let clearance = if self.o_min_m > 0.0 {
            self.o_min_m + self.clearance_margin_m
        } else {
            0.0
        };
        AllocatorWeights::diagonal(n, self.q1, self.q2, self.q3, self.gamma, clearance)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub platform: PlatformConfig,
    pub downwash: DownwashModel,
    /// Apply the downwash disturbance to the plant.
    pub inject_downwash: bool,
    pub mode: AllocatorMode,
    pub allocator: AllocatorSettings,
    pub tracking: TrackingGains,
    pub gimbal: GimbalPidGains,
    pub trajectory: Trajectory,
    pub duration: f64,
    pub seed: u64,
    /// Transport delay between allocator and low level [s].
    pub delay: f64,
    /// Propeller thrust time constant; zero means instantaneous [s].
    pub thrust_lag: f64,
    pub noise: NoiseSettings,
    /// Position error treated as divergence [m].
    pub divergence_position_m: f64,
}

impl Scenario {
    /// Level hover at `height` with the preset defaults.
    pub fn hover(name: &str, platform: PlatformConfig, height: f64, duration: f64) -> Self {
        Self {
            name: name.to_string(),
            downwash: DownwashModel::default(),
            inject_downwash: true,
            mode: AllocatorMode::DownwashAware,
            allocator: AllocatorSettings::default(),
            tracking: TrackingGains::default(),
            gimbal: GimbalPidGains::default(),
            trajectory: Trajectory::hover(Vec3::new(0.0, 0.0, height)),
            duration,
            seed: 0,
            delay: 0.02,
            thrust_lag: 0.0,
            noise: NoiseSettings::default(),
            divergence_position_m: 2.0,
            platform,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.platform.validate()?;
        self.downwash
            .validate()
            .map_err(|e| ConfigError::invalid(e.to_string()))?;
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(ConfigError::invalid(format!("duration must be positive, got {}", self.duration)));
        }
        if !(self.delay >= 0.0 && self.delay.is_finite()) {
            return Err(ConfigError::invalid("delay must be non-negative"));
        }
        if !(self.thrust_lag >= 0.0 && self.thrust_lag.is_finite()) {
            return Err(ConfigError::invalid("thrust lag must be non-negative"));
        }
        if !(self.divergence_position_m > 0.0) {
            return Err(ConfigError::invalid("divergence threshold must be positive"));
        }
        let noise = [
            self.noise.position_m,
            self.noise.velocity_m_per_s,
            self.noise.attitude_rad,
            self.noise.rate_rad_per_s,
        ];
        if !noise.iter().all(|s| *s >= 0.0 && s.is_finite()) {
            return Err(ConfigError::invalid("noise deviations must be non-negative"));
        }
        if !self.tracking.is_valid() {
            return Err(ConfigError::invalid("tracking gains must be positive"));
        }
        if !self.gimbal.is_valid() {
            return Err(ConfigError::invalid("gimbal gains must be non-negative"));
        }
        if self.allocator.max_iter == 0 {
            return Err(ConfigError::invalid("allocator max_iter must be positive"));
        }
        if !(self.allocator.clearance_margin_m >= 0.0) {
            return Err(ConfigError::invalid("clearance margin must be non-negative"));
        }
        self.allocator
            .weights(self.platform.n_generators)
            .validate(self.platform.n_generators)
            .map_err(ConfigError::invalid)?;
        self.trajectory.validate(self.duration)
    }
}

/// One physics tick.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub t: f64,
    pub position: Vec3,
    pub attitude: Vec3,
    pub velocity: Vec3,
    pub angular_velocity: Vec3,
    pub ref_position: Vec3,
    pub ref_attitude: Vec3,
    /// Latest desired wrench.
    pub u_d: Wrench,
    /// Latest allocator output.
    pub command: AllocationVector,
    /// Realized gimbal angles and module thrusts.
    pub actuators: AllocationVector,
    pub forces: DVector<f64>,
    pub slack_norm: f64,
    /// Thrust efficiency of the latest command.
    pub efficiency: f64,
    /// `O(X)` of the latest command.
    pub constraints: DVector<f64>,
    /// Gated bounds of the latest command with the scenario's `o_min`.
    pub bounds: DVector<f64>,
    pub ext: Wrench,
    pub prop_thrusts: Vec<[f64; 4]>,
    pub qp_status: QpStatus,
    pub qp_iterations: usize,
    pub relaxation: Relaxation,
    /// Allocation ran on this tick.
    pub alloc_tick: bool,
    pub saturated: bool,
    /// Relative wrench reconstruction error of the latest allocation.
    pub wrench_error: f64,
}

impl LogRecord {
    /// Gated pairs of the latest command closer than `o_min`.
    pub fn violations(&self) -> usize {
        self.constraints
            .iter()
            .zip(self.bounds.iter())
            .filter(|(o, b)| **b > 0.0 && **o < **b - VIOLATION_TOL)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLog {
    pub scenario: String,
    pub mode: AllocatorMode,
    pub n_generators: usize,
    pub o_min: f64,
    pub records: Vec<LogRecord>,
}

/// Finished or aborted run. A failed run keeps every record up to the failure.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRun {
    pub log: SimLog,
    pub failure: Option<SimError>,
}

impl SimRun {
    pub fn diverged(&self) -> bool {
        matches!(
            self.failure,
            Some(SimError::Dynamics(_)) | Some(SimError::Control(_))
        )
    }
}

struct Measurement {
    normal: Option<[Normal<f64>; 4]>,
}

impl Measurement {
    fn new(noise: &NoiseSettings) -> Self {
        let sigmas = [noise.position_m, noise.velocity_m_per_s, noise.attitude_rad, noise.rate_rad_per_s];
        let normal = if sigmas.iter().all(|s| *s == 0.0) {
            None
        } else {
            Some(sigmas.map(|s| Normal::new(0.0, s).expect("validated deviation")))
        };
        Self { normal }
    }

    fn measure(&self, state: &PlatformState, rng: &mut ChaCha8Rng) -> PlatformState {
        let mut m = state.clone();
        if let Some([p, v, a, r]) = &self.normal {
            let mut draw = |d: &Normal<f64>| Vec3::new(d.sample(rng), d.sample(rng), d.sample(rng));
            m.position += draw(p);
            m.velocity += draw(v);
            m.attitude += draw(a);
            m.angular_velocity += draw(r);
        }
        m
    }
}

fn failed(log: SimLog, error: impl Into<SimError>) -> SimRun {
    SimRun {
        log,
        failure: Some(error.into()),
    }
}

/// Runs `scenario` to completion or to the first failure.
pub fn run(scenario: &Scenario) -> SimRun {
    let cfg = &scenario.platform;
    let n = cfg.n_generators;
    let mut log = SimLog {
        scenario: scenario.name.clone(),
        mode: scenario.mode,
        n_generators: n,
        o_min: scenario.allocator.o_min_m,
        records: Vec::new(),
    };
    if let Err(e) = scenario.validate() {
        return failed(log, e);
    }
    let params = DynamicsParams::from_config(cfg);
    let mut allocator = match Allocator::new(cfg.clone(), scenario.allocator.weights(n), scenario.mode) {
        Ok(a) => a,
        Err(e) => return failed(log, e),
    };
    allocator.options = QpOptions {
        max_iter: scenario.allocator.max_iter,
        ..QpOptions::default()
    };
    let mixer = QuadMixer::from_config(cfg);
    let measurement = Measurement::new(&scenario.noise);
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let model = if scenario.inject_downwash {
        scenario.downwash
    } else {
        scenario.downwash.disabled()
    };

    let hover = cfg.hover_allocation();
    let start = scenario.trajectory.sample(0.0);
    let mut state = PlatformState::at_rest(start.position, hover.clone());
    state.attitude = start.attitude;
    let mut command = hover.clone();
    let mut active = hover.clone();
    let mut queue: VecDeque<(u64, AllocationVector)> = VecDeque::new();
    let delay_ticks = (scenario.delay / PHYSICS_DT).round() as u64;
    let mut pid = GimbalPid::new(n);
    let per_prop = |x: &AllocationVector| (0..n).map(|i| [x.thrust(i) / 4.0; 4]).collect::<Vec<_>>();
    let mut prop_cmd = per_prop(&hover);
    let mut prop_act = prop_cmd.clone();
    let mut saturated = false;

    let mut u_d = Wrench::zero();
    let mut forces = crate::allocation::forces_from_x(&hover);
    let mut slack_norm = 0.0;
    let mut efficiency = 1.0;
    let mut constraints = constraint_vector(cfg, &hover);
    let mut bounds = constraint_bound(cfg, &hover, scenario.allocator.o_min_m);
    let mut qp_status = QpStatus::Optimal;
    let mut qp_iterations = 0;
    let mut relaxation = Relaxation::None;
    let mut wrench_error = 0.0;
    let lag_gain = if scenario.thrust_lag > 0.0 {
        PHYSICS_DT / (scenario.thrust_lag + PHYSICS_DT)
    } else {
        1.0
    };

    let steps = (scenario.duration / PHYSICS_DT).round() as u64;
    for k in 0..steps {
        let t = k as f64 * PHYSICS_DT;
        let reference = scenario.trajectory.sample(t);
        let alloc_tick = k % HIGH_LEVEL_DIVIDER == 0;
        if alloc_tick {
            let measured = measurement.measure(&state, &mut rng);
            u_d = match high_level(&reference, &measured, &scenario.tracking, &params) {
                Ok(u) => u,
                Err(e) => return failed(log, e),
            };
            let result = match allocator.allocate(&u_d, &command) {
                Ok(r) => r,
                Err(e) => return failed(log, e),
            };
            wrench_error = result.wrench_error(&allocator.matrices, &u_d);
            command = result.x;
            forces = result.forces;
            slack_norm = result.slack.norm();
            efficiency = result.efficiency;
            constraints = result.constraints;
            bounds = constraint_bound(cfg, &command, scenario.allocator.o_min_m);
            qp_status = result.qp_status;
            qp_iterations = result.qp_iterations;
            relaxation = result.relaxation;
            queue.push_back((k + delay_ticks, command.clone()));
        }
        while queue.front().is_some_and(|(release, _)| *release <= k) {
            active = queue.pop_front().expect("front checked").1;
        }

        if k % LOW_LEVEL_DIVIDER == 0 {
            let e_alpha: Vec<f64> = (0..n).map(|i| active.alpha(i) - state.actuators.alpha(i)).collect();
            let e_beta: Vec<f64> = (0..n).map(|i| active.beta(i) - state.actuators.beta(i)).collect();
            let dt = PHYSICS_DT * LOW_LEVEL_DIVIDER as f64;
            let (alpha_dd, beta_dd) = pid.update(&e_alpha, &e_beta, dt, &scenario.gimbal);
            saturated = false;
            for i in 0..n {
                let torque = joint_torques(alpha_dd[i], beta_dd[i], state.actuators.beta(i), &cfg.module_inertia);
                let mix = mixer.mix(active.thrust(i), &torque, cfg.max_prop_thrust);
                saturated |= mix.saturated;
                prop_cmd[i] = mix.thrusts;
            }
        }
        for (act, cmd) in prop_act.iter_mut().zip(&prop_cmd) {
            for j in 0..4 {
                act[j] += lag_gain * (cmd[j] - act[j]);
            }
        }

        let decrements = thrust_decrements(cfg, &model, &state.actuators, &prop_act);
        let disturbance = disturbance_wrench(cfg, &decrements, &state.attitude, &state.actuators);
        let mut next_actuators = state.actuators.clone();
        for i in 0..n {
            let (thrust, _) = mixer.forward(&prop_act[i]);
            let mut total = prop_act[i];
            for j in 0..4 {
                total[j] += decrements[i][j];
            }
            let (_, torque) = mixer.forward(&total);
            let (a_dd, b_dd) = joint_accelerations(&torque, state.actuators.beta(i), &cfg.module_inertia);
            state.actuators.set(i, state.actuators.alpha(i), state.actuators.beta(i), thrust);
            let mut a_rate = state.gimbal_rates[i] + a_dd * PHYSICS_DT;
            let mut b_rate = state.gimbal_rates[n + i] + b_dd * PHYSICS_DT;
            let mut alpha = state.actuators.alpha(i) + a_rate * PHYSICS_DT;
            let mut beta = state.actuators.beta(i) + b_rate * PHYSICS_DT;
            if !cfg.tilt_limits.contains(alpha) {
                alpha = cfg.tilt_limits.clamp(alpha);
                a_rate = 0.0;
            }
            if !cfg.twist_limits.contains(beta) {
                beta = cfg.twist_limits.clamp(beta);
                b_rate = 0.0;
            }
            next_actuators.set(i, alpha, beta, thrust);
            state.gimbal_rates[i] = a_rate;
            state.gimbal_rates[n + i] = b_rate;
        }

        let u = actuation_wrench(cfg, &state.actuators);
        log.records.push(LogRecord {
            t,
            position: state.position,
            attitude: state.attitude,
            velocity: state.velocity,
            angular_velocity: state.angular_velocity,
            ref_position: reference.position,
            ref_attitude: reference.attitude,
            u_d,
            command: command.clone(),
            actuators: state.actuators.clone(),
            forces: forces.clone(),
            slack_norm,
            efficiency,
            constraints: constraints.clone(),
            bounds: bounds.clone(),
            ext: disturbance.wrench,
            prop_thrusts: prop_act.clone(),
            qp_status,
            qp_iterations,
            relaxation,
            alloc_tick,
            saturated,
            wrench_error,
        });

        state = match step(&params, &state, &u, &disturbance.wrench, PHYSICS_DT, t) {
            Ok(s) => s,
            Err(e) => return failed(log, e),
        };
        state.actuators = next_actuators;
        let error = (state.position - scenario.trajectory.sample(t + PHYSICS_DT).position).norm();
        if error > scenario.divergence_position_m {
            return failed(
                log,
                DynamicsError::IntegrationDiverged {
                    time: t + PHYSICS_DT,
                    what: format!("position error {error:.3} m"),
                },
            );
        }
    }
    SimRun { log, failure: None }
}

/// Scalar summary of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub scenario: String,
    pub mode: AllocatorMode,
    pub completed: bool,
    pub failure: String,
    pub duration_s: f64,
    pub rms_position_error_m: f64,
    pub max_position_error_m: f64,
    pub rms_attitude_error_rad: f64,
    /// Largest distance below the reference height.
    pub max_z_drop_m: f64,
    pub max_z_deviation_m: f64,
    pub min_efficiency: f64,
    pub mean_efficiency: f64,
    /// Allocation ticks after the transient with a gated pair closer than `o_min`.
    pub violation_count: usize,
    /// Integral of the summed module thrust [N s].
    pub total_impulse_n_s: f64,
    pub saturation_ticks: usize,
    pub relaxed_allocations: usize,
    pub max_wrench_error: f64,
}

fn attitude_error_angle(a: &Vec3, b: &Vec3) -> f64 {
    let r = rotation_body_to_world(b).transpose() * rotation_body_to_world(a);
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Summary of `run`; violations are counted from `transient` seconds on.
pub fn metrics(run: &SimRun, transient: f64) -> Result<Summary, SimError> {
    let log = &run.log;
    let records = &log.records;
    let last = records.last().ok_or(SimError::EmptyLog)?;
    let count = records.len() as f64;
    let mut sq_pos = 0.0;
    let mut sq_att = 0.0;
    let mut max_pos: f64 = 0.0;
    let mut max_drop: f64 = 0.0;
    let mut max_dev: f64 = 0.0;
    let mut impulse = 0.0;
    let mut saturation_ticks = 0;
    for r in records {
        let e = (r.position - r.ref_position).norm();
        sq_pos += e * e;
        max_pos = max_pos.max(e);
        let ea = attitude_error_angle(&r.attitude, &r.ref_attitude);
        sq_att += ea * ea;
        max_drop = max_drop.max(r.ref_position.z - r.position.z);
        max_dev = max_dev.max((r.position.z - r.ref_position.z).abs());
        impulse += r.actuators.total_thrust() * PHYSICS_DT;
        saturation_ticks += r.saturated as usize;
    }
    let alloc: Vec<&LogRecord> = records.iter().filter(|r| r.alloc_tick).collect();
    let min_eff = alloc.iter().map(|r| r.efficiency).fold(f64::INFINITY, f64::min);
    let mean_eff = alloc.iter().map(|r| r.efficiency).sum::<f64>() / alloc.len().max(1) as f64;
    Ok(Summary {
        scenario: log.scenario.clone(),
        mode: log.mode,
        completed: run.failure.is_none(),
        failure: run.failure.as_ref().map(|e| e.to_string()).unwrap_or_default(),
        duration_s: last.t + PHYSICS_DT,
        rms_position_error_m: (sq_pos / count).sqrt(),
        max_position_error_m: max_pos,
        rms_attitude_error_rad: (sq_att / count).sqrt(),
        max_z_drop_m: max_drop,
        max_z_deviation_m: max_dev,
        min_efficiency: if min_eff.is_finite() { min_eff } else { 1.0 },
        mean_efficiency: if alloc.is_empty() { 1.0 } else { mean_eff },
        violation_count: alloc.iter().filter(|r| r.t >= transient && r.violations() > 0).count(),
        total_impulse_n_s: impulse,
        saturation_ticks,
        relaxed_allocations: alloc.iter().filter(|r| r.relaxation != Relaxation::None).count(),
        max_wrench_error: alloc.iter().map(|r| r.wrench_error).fold(0.0, f64::max),
    })
}

/// Maximal runs of allocation ticks with a gated violation, merged across gaps shorter
/// than `gap` seconds. Returns `(start, end)` times.
pub fn violation_episodes(log: &SimLog, gap: f64) -> Vec<(f64, f64)> {
    let mut episodes: Vec<(f64, f64)> = Vec::new();
    for r in log.records.iter().filter(|r| r.alloc_tick && r.violations() > 0) {
        match episodes.last_mut() {
            Some(last) if r.t - last.1 <= gap => last.1 = r.t,
            _ => episodes.push((r.t, r.t)),
        }
    }
    episodes
}

/// Largest position error inside `[t0, t1]`.
pub fn max_error_between(log: &SimLog, t0: f64, t1: f64) -> f64 {
    log.records
        .iter()
        .filter(|r| r.t >= t0 && r.t <= t1)
        .map(|r| (r.position - r.ref_position).norm())
        .fold(0.0, f64::max)
}

fn csv_header(n: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "t", "x", "y", "z", "phi", "theta", "psi", "vx", "vy", "vz", "p", "q", "r", "x_ref", "y_ref", "z_ref",
        "phi_ref", "theta_ref", "psi_ref", "ud_fx", "ud_fy", "ud_fz", "ud_tx", "ud_ty", "ud_tz",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for prefix in ["alpha_cmd", "beta_cmd", "thrust_cmd", "alpha", "beta", "thrust"] {
        h.extend((1..=n).map(|i| format!("{prefix}_{i}")));
    }
    for i in 1..=n {
        h.extend(["x", "y", "z"].iter().map(|c| format!("f{c}_{i}")));
    }
    h.extend(["slack_norm", "eta_f"].iter().map(|s| s.to_string()));
    for i in 1..=n {
        for j in (1..=n).filter(|&j| j != i) {
            h.push(format!("o2_{i}_{j}"));
        }
    }
    for i in 1..=n {
        for j in (1..=n).filter(|&j| j != i) {
            h.push(format!("o2min_{i}_{j}"));
        }
    }
    h.extend(["ext_fx", "ext_fy", "ext_fz", "ext_tx", "ext_ty", "ext_tz"].iter().map(|s| s.to_string()));
    for i in 1..=n {
        h.extend((1..=4).map(|j| format!("t_{i}_{j}")));
    }
    h.extend(
        ["qp_status", "qp_iterations", "relaxation", "alloc_tick", "saturated", "wrench_error"]
            .iter()
            .map(|s| s.to_string()),
    );
    h
}

fn push_vec(row: &mut Vec<String>, v: &Vec3) {
    row.extend(v.iter().map(|c| c.to_string()));
}

/// Writes the log as CSV: a schema line, an optional comment line, the header, one row
/// per physics tick.
pub fn write_csv<W: Write>(log: &SimLog, out: &mut W, comment: Option<&str>) -> io::Result<()> {
    let n = log.n_generators;
    writeln!(out, "# {LOG_SCHEMA} scenario={} mode={}", log.scenario, log.mode)?;
    if let Some(c) = comment {
        writeln!(out, "# {c}")?;
    }
    writeln!(out, "{}", csv_header(n).join(","))?;
    let mut row: Vec<String> = Vec::new();
    for r in &log.records {
        row.clear();
        row.push(r.t.to_string());
        for v in [
            &r.position,
            &r.attitude,
            &r.velocity,
            &r.angular_velocity,
            &r.ref_position,
            &r.ref_attitude,
            &r.u_d.force,
            &r.u_d.torque,
        ] {
            push_vec(&mut row, v);
        }
        row.extend(r.command.as_vector().iter().map(|v| v.to_string()));
        row.extend(r.actuators.as_vector().iter().map(|v| v.to_string()));
        row.extend(r.forces.iter().map(|v| v.to_string()));
        row.push(r.slack_norm.to_string());
        row.push(r.efficiency.to_string());
        row.extend(r.constraints.iter().map(|v| v.to_string()));
        row.extend(r.bounds.iter().map(|v| v.to_string()));
        push_vec(&mut row, &r.ext.force);
        push_vec(&mut row, &r.ext.torque);
        for p in &r.prop_thrusts {
            row.extend(p.iter().map(|v| v.to_string()));
        }
        row.push(
            match r.qp_status {
                QpStatus::Optimal => "optimal",
                QpStatus::Infeasible => "infeasible",
                QpStatus::MaxIter => "max-iter",
            }
            .to_string(),
        );
        row.push(r.qp_iterations.to_string());
        row.push(
            match r.relaxation {
                Relaxation::None => "none",
                Relaxation::Scaled => "scaled",
                Relaxation::Dropped => "dropped",
            }
            .to_string(),
        );
        row.push((r.alloc_tick as u8).to_string());
        row.push((r.saturated as u8).to_string());
        row.push(r.wrench_error.to_string());
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Column names of [`write_csv`] for `n` generators.
pub fn csv_columns(n: usize) -> Vec<String> {
    csv_header(n)
}
