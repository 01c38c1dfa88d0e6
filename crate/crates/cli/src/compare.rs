//! Side-by-side comparison of two run summaries.

use std::fmt::Write as _;

use dwa_core::sim::Summary;

/// One compared quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub metric: &'static str,
    pub a: f64,
    pub b: f64,
}

impl Row {
    pub fn delta(&self) -> f64 {
        self.b - self.a
    }
}

/// Summaries are comparable when they come from the same scenario.
pub fn check_matching(a: &Summary, b: &Summary) -> Result<(), String> {
    if a.scenario != b.scenario {
        return Err(format!(
            "summaries belong to different scenarios: `{}` vs `{}`",
            a.scenario, b.scenario
        ));
    }
    Ok(())
}

pub fn rows(a: &Summary, b: &Summary) -> Vec<Row> {
    let pick: [(&'static str, fn(&Summary) -> f64); 13] = [
        ("completed", |s| s.completed as u8 as f64),
        ("duration_s", |s| s.duration_s),
        ("rms_position_error_m", |s| s.rms_position_error_m),
        ("max_position_error_m", |s| s.max_position_error_m),
        ("rms_attitude_error_rad", |s| s.rms_attitude_error_rad),
        ("max_z_drop_m", |s| s.max_z_drop_m),
        ("max_z_deviation_m", |s| s.max_z_deviation_m),
        ("min_efficiency", |s| s.min_efficiency),
        ("mean_efficiency", |s| s.mean_efficiency),
        ("violation_count", |s| s.violation_count as f64),
        ("total_impulse_n_s", |s| s.total_impulse_n_s),
        ("saturation_ticks", |s| s.saturation_ticks as f64),
        ("relaxed_allocations", |s| s.relaxed_allocations as f64),
    ];
    pick.iter()
        .map(|(metric, f)| Row { metric, a: f(a), b: f(b) })
        .collect()
}

/// Fixed-width text table with a header naming both runs.
pub fn table(a: &Summary, b: &Summary) -> String {
    let label_a = a.mode.to_string();
    let label_b = if b.mode == a.mode { format!("{} (b)", b.mode) } else { b.mode.to_string() };
    let mut out = String::new();
    let _ = writeln!(out, "scenario: {}", a.scenario);
    let _ = writeln!(out, "{:<24} {:>16} {:>16} {:>14}", "metric", label_a, label_b, "delta");
    for r in rows(a, b) {
        let _ = writeln!(out, "{:<24} {:>16.6} {:>16.6} {:>+14.6}", r.metric, r.a, r.b, r.delta());
    }
    if !a.failure.is_empty() {
        let _ = writeln!(out, "{label_a} failed: {}", a.failure);
    }
    if !b.failure.is_empty() {
        let _ = writeln!(out, "{label_b} failed: {}", b.failure);
    }
    out
}

/// `metric,a,b,delta` rows with full precision.
pub fn csv(a: &Summary, b: &Summary) -> String {
    let mut out = String::from("metric,a,b,delta\n");
    for r in rows(a, b) {
        let _ = writeln!(out, "{},{},{},{}", r.metric, r.a, r.b, r.delta());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use dwa_core::allocation::AllocatorMode;

    fn summary(name: &str) -> Summary {
        Summary {
            scenario: name.into(),
            mode: AllocatorMode::DownwashAware,
            completed: true,
            failure: String::new(),
            duration_s: 5.0,
            rms_position_error_m: 0.01,
            max_position_error_m: 0.02,
            rms_attitude_error_rad: 0.001,
            max_z_drop_m: 0.003,
            max_z_deviation_m: 0.004,
            min_efficiency: 0.99,
            mean_efficiency: 0.995,
            violation_count: 3,
            total_impulse_n_s: 10.8,
            saturation_ticks: 0,
            relaxed_allocations: 1,
            max_wrench_error: 1e-12,
        }
    }

    #[test]
    fn identical_summaries_have_zero_deltas() {
        let s = summary("hover4");
        assert!(rows(&s, &s).iter().all(|r| r.delta() == 0.0));
    }

    #[test]
    fn delta_is_b_minus_a() {
        let a = summary("x");
        let mut b = a.clone();
        b.violation_count = 10;
        let row = rows(&a, &b).into_iter().find(|r| r.metric == "violation_count").unwrap();
        assert_eq!(row.delta(), 7.0);
    }

    #[test]
    fn mismatched_scenarios_are_rejected() {
        assert!(check_matching(&summary("a"), &summary("b")).is_err());
        assert!(check_matching(&summary("a"), &summary("a")).is_ok());
    }

    #[test]
    fn csv_has_one_line_per_metric() {
        let s = summary("x");
        let text = csv(&s, &s);
        assert_eq!(text.lines().count(), 1 + rows(&s, &s).len());
        assert!(text.lines().nth(1).unwrap().starts_with("completed,1,1,0"));
    }
}
