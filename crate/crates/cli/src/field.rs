//! Sampling of the wake velocity profile on a rectangular `(z, r)` grid.

use std::io::{self, Write};

use dwa_core::downwash::DownwashModel;

/// Evenly spaced samples of `[min, max]`; a single sample sits at `min`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Axis {
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        let step = if self.count > 1 {
            (self.max - self.min) / (self.count - 1) as f64
        } else {
            0.0
        };
        (0..self.count).map(move |k| if k + 1 == self.count && k > 0 { self.max } else { self.min + step * k as f64 })
    }

    fn check(&self, name: &str) -> Result<(), String> {
        if self.count == 0 {
            return Err(format!("{name} grid needs at least one point"));
        }
        if !(self.min.is_finite() && self.max.is_finite() && self.min <= self.max) {
            return Err(format!("{name} range [{}, {}] is empty or not finite", self.min, self.max));
        }
        Ok(())
    }
}

/// Row-major `(z, r, V)` samples, `r` varying fastest.
pub fn sample(model: &DownwashModel, z: &Axis, r: &Axis) -> Result<Vec<[f64; 3]>, String> {
    model.validate().map_err(|e| e.to_string())?;
    z.check("z")?;
    r.check("r")?;
    let z_far = model.z0_m + model.zfe_length();
    if !(z.min > model.z0_m && z.max <= z_far) {
        return Err(format!(
            "z range [{}, {}] m lies outside the modeled jet ({} m, {} m]",
            z.min, z.max, model.z0_m, z_far
        ));
    }
    if r.min < 0.0 {
        return Err(format!("radial distance must be non-negative, got {}", r.min));
    }
    let mut out = Vec::with_capacity(z.count * r.count);
    for zv in z.values() {
        for rv in r.values() {
            let v = model.axial_velocity(zv, rv).map_err(|e| e.to_string())?;
            out.push([zv, rv, v]);
        }
    }
    Ok(out)
}

pub fn write_csv<W: Write>(rows: &[[f64; 3]], out: &mut W) -> io::Result<()> {
    writeln!(out, "z_m,r_m,v_m_per_s")?;
    for [z, r, v] in rows {
        writeln!(out, "{z},{r},{v}")?;
    }
    Ok(())
}
