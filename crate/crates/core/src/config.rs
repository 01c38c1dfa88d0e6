//! TOML scenario and platform files.
//!
//! Every key carries its unit in the name and unknown keys are rejected. A scenario names a
//! platform preset (or a platform file) and overrides only what it needs; everything else
//! keeps the preset defaults. See `docs/schema.md` for the full key list.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Unit;
use serde::Deserialize;
use toml::Spanned;

use crate::allocation::AllocatorMode;
use crate::error::ConfigError;
use crate::frames::Vec3;
use crate::platform::{regular_polygon, Interval, PlatformConfig};
use crate::sim::{AngleSegment, MoveSegment, NoiseSettings, Scenario, Trajectory};

/// Names accepted by `[platform] preset`.
pub const PRESETS: [&str; 2] = ["four", "six"];

pub fn preset(name: &str) -> Option<PlatformConfig> {
    match name {
        "four" => Some(PlatformConfig::four()),
        "six" => Some(PlatformConfig::six()),
        _ => None,
    }
}

/// 1-based line and column of byte `offset` in `text`.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(offset, |p| offset - p - 1) + 1;
    (line, col)
}

fn parse_error(origin: &str, text: &str, span: Option<std::ops::Range<usize>>, message: &str) -> ConfigError {
    let message = message.trim_end().to_string();
    let message = match span {
        Some(span) => {
            let (line, col) = line_col(text, span.start);
            format!("line {line}, column {col}: {message}")
        }
        None => message,
    };
    ConfigError::Parse {
        path: origin.to_string(),
        message,
    }
}

fn decode<T: for<'de> Deserialize<'de>>(text: &str, origin: &str) -> Result<T, ConfigError> {
    toml::from_str(text).map_err(|e| parse_error(origin, text, e.span(), e.message()))
}

fn read(path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn interval(v: [f64; 2]) -> Interval {
    Interval::new(v[0], v[1])
}

fn vec3(v: [f64; 3]) -> Vec3 {
    Vec3::new(v[0], v[1], v[2])
}

/// Copies the limit fields shared by platform files and `[platform]` sections.
macro_rules! limits {
    ($t:ident, $src:expr) => {
        $t {
            com_offset_m: $src.com_offset_m,
            tilt_limits_rad: $src.tilt_limits_rad,
            twist_limits_rad: $src.twist_limits_rad,
            thrust_limits_n: $src.thrust_limits_n,
            tilt_rate_rad: $src.tilt_rate_rad,
            twist_rate_rad: $src.twist_rate_rad,
            thrust_rate_n: $src.thrust_rate_n,
        }
    };
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlatformFile {
    n_generators: usize,
    frame_mass_kg: f64,
    module_mass_kg: f64,
    frame_inertia_kg_cm2: [f64; 3],
    module_inertia_kg_cm2: [f64; 3],
    arm_length_m: f64,
    prop_offset_m: f64,
    max_prop_thrust_n: f64,
    prop_thrust_const_n_s2: Option<f64>,
    prop_drag_const_n_m_s2: Option<f64>,
    /// Explicit mount positions; a regular polygon of radius `arm_length_m` otherwise.
    mount_positions_m: Option<Vec<[f64; 3]>>,
    com_offset_m: Option<[f64; 3]>,
    tilt_limits_rad: Option<[f64; 2]>,
    twist_limits_rad: Option<[f64; 2]>,
    thrust_limits_n: Option<[f64; 2]>,
    tilt_rate_rad: Option<f64>,
    twist_rate_rad: Option<f64>,
    thrust_rate_n: Option<f64>,
}

/// Platform fields a scenario may override on top of a preset or file.
#[derive(Debug, Default)]
struct PlatformOverrides {
    com_offset_m: Option<[f64; 3]>,
    tilt_limits_rad: Option<[f64; 2]>,
    twist_limits_rad: Option<[f64; 2]>,
    thrust_limits_n: Option<[f64; 2]>,
    tilt_rate_rad: Option<f64>,
    twist_rate_rad: Option<f64>,
    thrust_rate_n: Option<f64>,
}

impl PlatformOverrides {
    fn apply(&self, cfg: &mut PlatformConfig) {
        if let Some(v) = self.com_offset_m {
            cfg.com_offset = vec3(v);
        }
        if let Some(v) = self.tilt_limits_rad {
            cfg.tilt_limits = interval(v);
        }
        if let Some(v) = self.twist_limits_rad {
            cfg.twist_limits = interval(v);
        }
        if let Some(v) = self.thrust_limits_n {
            cfg.thrust_limits = interval(v);
        }
        if let Some(v) = self.tilt_rate_rad {
            cfg.rate_limits.tilt = v;
        }
        if let Some(v) = self.twist_rate_rad {
            cfg.rate_limits.twist = v;
        }
        if let Some(v) = self.thrust_rate_n {
            cfg.rate_limits.thrust = v;
        }
    }
}

impl PlatformFile {
    fn build(self) -> PlatformConfig {
        let mut cfg = PlatformConfig::regular(
            self.n_generators,
            self.frame_mass_kg,
            self.module_mass_kg,
            vec3(self.frame_inertia_kg_cm2),
            vec3(self.module_inertia_kg_cm2),
            self.arm_length_m,
            self.prop_offset_m,
            self.max_prop_thrust_n,
        );
        if let Some(k) = self.prop_thrust_const_n_s2 {
            cfg.prop_thrust_const = k;
        }
        if let Some(k) = self.prop_drag_const_n_m_s2 {
            cfg.prop_drag_const = k;
        }
        cfg.mount_positions = match self.mount_positions_m {
            Some(points) => points.into_iter().map(vec3).collect(),
            None => regular_polygon(self.n_generators, self.arm_length_m),
        };
        limits!(PlatformOverrides, self).apply(&mut cfg);
        cfg
    }
}

/// Parses and validates a platform file.
pub fn parse_platform(text: &str, origin: &str) -> Result<PlatformConfig, ConfigError> {
    let file: PlatformFile = decode(text, origin)?;
    let cfg = file.build();
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_platform(path: &Path) -> Result<PlatformConfig, ConfigError> {
    parse_platform(&read(path)?, &path.display().to_string())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlatformSection {
    preset: Option<Spanned<String>>,
    file: Option<Spanned<PathBuf>>,
    com_offset_m: Option<[f64; 3]>,
    tilt_limits_rad: Option<[f64; 2]>,
    twist_limits_rad: Option<[f64; 2]>,
    thrust_limits_n: Option<[f64; 2]>,
    tilt_rate_rad: Option<f64>,
    twist_rate_rad: Option<f64>,
    thrust_rate_n: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DownwashSection {
    /// Apply the wake disturbance to the plant.
    inject: Option<bool>,
    k_visc: Option<f64>,
    z0_m: Option<f64>,
    r0_m: Option<f64>,
    v0_m_per_s: Option<f64>,
    rm0_m: Option<f64>,
    c1: Option<f64>,
    c2: Option<f64>,
    b_v_s_per_m: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AllocatorSection {
    q1: Option<f64>,
    q2: Option<f64>,
    q3: Option<f64>,
    gamma: Option<f64>,
    o_min_m: Option<f64>,
    clearance_margin_m: Option<f64>,
    max_iter: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControlSection {
    /// Natural frequency of the critically damped position loop.
    position_bandwidth_rad_per_s: Option<f64>,
    attitude_bandwidth_rad_per_s: Option<f64>,
    kp_position: Option<[f64; 3]>,
    kd_position: Option<[f64; 3]>,
    kp_attitude: Option<[f64; 3]>,
    kd_attitude: Option<[f64; 3]>,
    gimbal_kp: Option<f64>,
    gimbal_ki: Option<f64>,
    gimbal_kd: Option<f64>,
    gimbal_integral_limit_rad_s: Option<f64>,
    gimbal_derivative_tau_s: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimSection {
    delay_s: Option<f64>,
    thrust_lag_s: Option<f64>,
    divergence_position_m: Option<f64>,
    noise: Option<NoiseSettings>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RotationEntry {
    start_s: f64,
    end_s: f64,
    axis: [f64; 3],
    angle_deg: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MoveEntry {
    start_s: f64,
    end_s: f64,
    to_m: [f64; 3],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectorySection {
    initial_position_m: [f64; 3],
    #[serde(default)]
    rotation: Vec<Spanned<RotationEntry>>,
    #[serde(default, rename = "move")]
    moves: Vec<MoveEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    mode: Option<AllocatorMode>,
    duration_s: f64,
    seed: Option<u64>,
    platform: Spanned<PlatformSection>,
    #[serde(default)]
    downwash: DownwashSection,
    #[serde(default)]
    allocator: AllocatorSection,
    #[serde(default)]
    control: ControlSection,
    #[serde(default)]
    sim: SimSection,
    trajectory: TrajectorySection,
}

fn set<T>(target: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *target = v;
    }
}

/// Parses a scenario. Relative platform file paths resolve against `base_dir`.
pub fn parse_scenario(text: &str, origin: &str, base_dir: Option<&Path>) -> Result<Scenario, ConfigError> {
    let file: ScenarioFile = decode(text, origin)?;
    let at = |span: std::ops::Range<usize>, msg: &str| parse_error(origin, text, Some(span), msg);

    let platform_span = file.platform.span();
    let section = file.platform.into_inner();
    let mut platform = match (&section.preset, &section.file) {
        (Some(name), None) => preset(name.get_ref()).ok_or_else(|| {
            at(
                name.span(),
                &format!("unknown platform preset `{}` (expected one of {})", name.get_ref(), PRESETS.join(", ")),
            )
        })?,
        (None, Some(path)) => {
            let p = match base_dir {
                Some(dir) if path.get_ref().is_relative() => dir.join(path.get_ref()),
                _ => path.get_ref().clone(),
            };
            load_platform(&p)?
        }
        _ => return Err(at(platform_span, "[platform] needs exactly one of `preset` or `file`")),
    };
    limits!(PlatformOverrides, section).apply(&mut platform);

    let mut scenario = Scenario::hover(&file.name, platform, 0.0, file.duration_s);
    set(&mut scenario.mode, file.mode);
    set(&mut scenario.seed, file.seed);

    let d = file.downwash;
    let model = &mut scenario.downwash;
    set(&mut scenario.inject_downwash, d.inject);
    set(&mut model.k_visc, d.k_visc);
    set(&mut model.z0_m, d.z0_m);
    set(&mut model.r0_m, d.r0_m);
    set(&mut model.v0_m_per_s, d.v0_m_per_s);
    set(&mut model.rm0_m, d.rm0_m);
    set(&mut model.c1, d.c1);
    set(&mut model.c2, d.c2);
    set(&mut model.b_v_s_per_m, d.b_v_s_per_m);

    let a = file.allocator;
    let alloc = &mut scenario.allocator;
    set(&mut alloc.q1, a.q1);
    set(&mut alloc.q2, a.q2);
    set(&mut alloc.q3, a.q3);
    set(&mut alloc.gamma, a.gamma);
    set(&mut alloc.o_min_m, a.o_min_m);
    set(&mut alloc.clearance_margin_m, a.clearance_margin_m);
    set(&mut alloc.max_iter, a.max_iter);

    let c = file.control;
    if c.position_bandwidth_rad_per_s.is_some() || c.attitude_bandwidth_rad_per_s.is_some() {
        let base = crate::control::TrackingGains::default();
        let w_pos = c.position_bandwidth_rad_per_s.unwrap_or(base.kp_position.x.sqrt());
        let w_att = c.attitude_bandwidth_rad_per_s.unwrap_or(base.kp_attitude.x.sqrt());
        scenario.tracking = crate::control::TrackingGains::critically_damped(w_pos, w_att);
    }
    let tracking = &mut scenario.tracking;
    set(&mut tracking.kp_position, c.kp_position.map(vec3));
    set(&mut tracking.kd_position, c.kd_position.map(vec3));
    set(&mut tracking.kp_attitude, c.kp_attitude.map(vec3));
    set(&mut tracking.kd_attitude, c.kd_attitude.map(vec3));
    let gimbal = &mut scenario.gimbal;
    if let Some(kp) = c.gimbal_kp {
        gimbal.kp_alpha = kp;
        gimbal.kp_beta = kp;
    }
    if let Some(ki) = c.gimbal_ki {
        gimbal.ki_alpha = ki;
        gimbal.ki_beta = ki;
    }
    if let Some(kd) = c.gimbal_kd {
        gimbal.kd_alpha = kd;
        gimbal.kd_beta = kd;
    }
    set(&mut gimbal.integral_limit, c.gimbal_integral_limit_rad_s);
    set(&mut gimbal.derivative_tau, c.gimbal_derivative_tau_s);

    let s = file.sim;
    set(&mut scenario.delay, s.delay_s);
    set(&mut scenario.thrust_lag, s.thrust_lag_s);
    set(&mut scenario.divergence_position_m, s.divergence_position_m);
    set(&mut scenario.noise, s.noise);

    let t = file.trajectory;
    let mut rotations = Vec::with_capacity(t.rotation.len());
    for entry in t.rotation {
        let span = entry.span();
        let r = entry.into_inner();
        let axis = vec3(r.axis);
        if !(axis.norm() > 1e-9 && axis.iter().all(|c| c.is_finite())) {
            return Err(at(span, "rotation axis must be a non-zero vector"));
        }
        rotations.push(AngleSegment {
            start: r.start_s,
            end: r.end_s,
            axis: Unit::new_normalize(axis),
            to: r.angle_deg.to_radians(),
        });
    }
    scenario.trajectory = Trajectory {
        initial_position: vec3(t.initial_position_m),
        rotations,
        moves: t
            .moves
            .into_iter()
            .map(|m| MoveSegment {
                start: m.start_s,
                end: m.end_s,
                to: vec3(m.to_m),
            })
            .collect(),
    };

    scenario.validate()?;
    Ok(scenario)
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ConfigError> {
    parse_scenario(&read(path)?, &path.display().to_string(), path.parent())
}
