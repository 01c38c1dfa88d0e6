//! Acceptance checks. Runs without the libtest harness and prints one line per criterion.

mod common;

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use dwa_core::allocation::{
    allocate, allocate_conventional, build_w, forces_from_x, inverse_kinematics, jacobian_f, Allocator,
    AllocatorMode, AllocatorWeights,
};
use dwa_core::control::QuadMixer;
use dwa_core::downwash::{constraint_bound, constraint_jacobian, constraint_vector, ordered_pairs};
use dwa_core::qp::{self, QpOptions};
use dwa_core::sim::{self, max_error_between, metrics, Scenario, SimRun};
use dwa_core::{AllocationVector, PlatformConfig, Vec3, Wrench, GRAVITY};
use nalgebra::{DMatrix, DVector, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRANSIENT_S: f64 = 1.0;

type Outcome = Result<String, String>;

struct Runs {
    hover4: [SimRun; 2],
    hover6: SimRun,
    pitch6: [SimRun; 2],
    pitch6_conv_time: Duration,
    two_event4: [SimRun; 2],
}

fn with_mode(mut s: Scenario, mode: AllocatorMode) -> Scenario {
    s.mode = mode;
    s
}

fn run_both(file: &str) -> ([SimRun; 2], Duration) {
    let s = common::scenario(file);
    let start = Instant::now();
    let conv = sim::run(&with_mode(s.clone(), AllocatorMode::Conventional));
    let elapsed = start.elapsed();
    let aware = sim::run(&with_mode(s, AllocatorMode::DownwashAware));
    ([conv, aware], elapsed)
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn exact_reconstruction(runs: &Runs) -> Outcome {
    let logs = [
        &runs.hover4[0],
        &runs.hover4[1],
        &runs.hover6,
        &runs.pitch6[0],
        &runs.pitch6[1],
        &runs.two_event4[0],
        &runs.two_event4[1],
    ];
    let mut logged_max: f64 = 0.0;
    let mut replay = Vec::new();
    for run in logs {
        let alloc: Vec<&Wrench> = run.log.records.iter().filter(|r| r.alloc_tick).map(|r| &r.u_d).collect();
        for r in run.log.records.iter().filter(|r| r.alloc_tick) {
            logged_max = logged_max.max(r.wrench_error);
        }
        let cfg = common::scenario(&format!("{}.toml", run.log.scenario)).platform;
        replay.push((cfg, alloc.into_iter().cloned().collect::<Vec<_>>()));
    }
    ensure(logged_max <= 1e-9, || format!("logged wrench error {logged_max:.3e}"))?;

    let start = Instant::now();
    let mut calls = 0usize;
    let mut worst: f64 = 0.0;
    for (cfg, demands) in &replay {
        let n = cfg.n_generators;
        for mode in [AllocatorMode::Conventional, AllocatorMode::DownwashAware] {
            let allocator = Allocator::new(cfg.clone(), AllocatorWeights::defaults(n), mode).map_err(|e| e.to_string())?;
            let mut x = cfg.hover_allocation();
            for u in demands {
                let r = allocator.allocate(u, &x).map_err(|e| format!("call {calls}: {e}"))?;
                worst = worst.max(r.wrench_error(&allocator.matrices, u));
                x = r.x;
                calls += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(calls >= 10_000, || format!("only {calls} allocation calls"))?;
    ensure(worst <= 1e-9, || format!("wrench error {worst:.3e}"))?;
    ensure(elapsed < Duration::from_secs(10), || format!("{calls} calls took {elapsed:.2?}"))?;
    Ok(format!(
        "{calls} replayed calls, max error {worst:.2e} (logged {logged_max:.2e}), {:.2} s",
        elapsed.as_secs_f64()
    ))
}

fn random_allocation(rng: &mut ChaCha8Rng, n: usize) -> AllocationVector {
    let a: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.4..1.4)).collect();
    let t: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    AllocationVector::from_parts(&a, &b, &t)
}

fn central_difference<F>(x: &AllocationVector, rows: usize, h: f64, f: F) -> DMatrix<f64>
where
    F: Fn(&AllocationVector) -> DVector<f64>,
{
    let v = x.as_vector();
    let mut jac = DMatrix::zeros(rows, v.len());
    for c in 0..v.len() {
        let mut plus = v.clone();
        let mut minus = v.clone();
        plus[c] += h;
        minus[c] -= h;
        let d = (f(&AllocationVector::from_vector(plus)) - f(&AllocationVector::from_vector(minus))) / (2.0 * h);
        jac.column_mut(c).copy_from(&d);
    }
    jac
}

fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-12)
}

fn jacobians() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-6;
    let mut worst_f: f64 = 0.0;
    let mut worst_o: f64 = 0.0;
    for k in 0..100 {
        let cfg = if k % 2 == 0 { PlatformConfig::four() } else { PlatformConfig::six() };
        let n = cfg.n_generators;
        let x = random_allocation(&mut rng, n);
        let fd = central_difference(&x, 3 * n, h, forces_from_x);
        worst_f = worst_f.max(relative_frobenius(&jacobian_f(&x), &fd));
    }
    let mut tested = 0;
    while tested < 100 {
        let cfg = if tested % 2 == 0 { PlatformConfig::four() } else { PlatformConfig::six() };
        let n = cfg.n_generators;
        let x = random_allocation(&mut rng, n);
        // Keep away from the clamp at O = 0, where the squared distance is not differentiable.
        if constraint_vector(&cfg, &x).min() < 1e-4 {
            continue;
        }
        let fd = central_difference(&x, n * (n - 1), h, |y| constraint_vector(&cfg, y));
        worst_o = worst_o.max(relative_frobenius(&constraint_jacobian(&cfg, &x), &fd));
        tested += 1;
    }
    ensure(worst_f <= 1e-5 && worst_o <= 1e-5, || {
        format!("relative error dF/dX {worst_f:.2e}, dO/dX {worst_o:.2e}")
    })?;
    Ok(format!("max relative error dF/dX {worst_f:.2e}, dO/dX {worst_o:.2e}"))
}

fn qp_kernel() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_obj: f64 = 0.0;
    let mut worst_kkt: f64 = 0.0;
    for k in 0..200 {
        let problem = common::random_qp(&mut rng, 30);
        let sol = qp::solve(&problem, &QpOptions::default()).map_err(|e| format!("problem {k}: {e}"))?;
        ensure(sol.is_optimal(), || format!("problem {k}: status {:?}", sol.status))?;
        let reference = common::admm(&problem, 1e-10, 200_000).ok_or_else(|| format!("problem {k}: reference did not converge"))?;
        let rel = (sol.objective - reference.objective).abs() / reference.objective.abs().max(1.0);
        worst_obj = worst_obj.max(rel);
        for r in common::kkt_residuals(&problem, &sol) {
            worst_kkt = worst_kkt.max(r);
        }
    }
    ensure(worst_obj <= 1e-6 && worst_kkt <= 1e-6, || {
        format!("objective error {worst_obj:.2e}, KKT residual {worst_kkt:.2e}")
    })?;
    Ok(format!("200 problems, objective error {worst_obj:.2e}, KKT residual {worst_kkt:.2e}"))
}

fn hover_efficiency(runs: &Runs) -> Outcome {
    let cfg = PlatformConfig::four();
    let m = cfg.frame_mass + 4.0 * cfg.module_mass;
    ensure((m - 0.220).abs() < 1e-12, || format!("mass {m}"))?;
    let share = m * GRAVITY / 4.0;
    ensure((share - 0.5395).abs() <= 1e-4, || format!("mg/4 = {share}"))?;
    let mut min_eta = f64::INFINITY;
    let mut worst_t: f64 = 0.0;
    for run in &runs.hover4 {
        ensure(run.failure.is_none(), || format!("{} failed: {:?}", run.log.mode, run.failure))?;
        for r in run.log.records.iter().filter(|r| r.alloc_tick && r.t >= TRANSIENT_S) {
            min_eta = min_eta.min(r.efficiency);
            for i in 0..4 {
                worst_t = worst_t.max((r.command.thrust(i) - share).abs());
            }
        }
    }
    ensure(min_eta >= 0.999 && worst_t <= 1e-3, || {
        format!("min eta {min_eta:.5}, thrust deviation {worst_t:.2e} N")
    })?;
    Ok(format!("min eta {min_eta:.5}, max |T - mg/4| {worst_t:.2e} N"))
}

fn conventional_pitch(runs: &Runs) -> Outcome {
    let s = metrics(&runs.pitch6[0], TRANSIENT_S).map_err(|e| e.to_string())?;
    let elapsed = runs.pitch6_conv_time;
    ensure(s.max_z_drop_m >= 0.1 && s.violation_count > 0 && elapsed < Duration::from_secs(60), || {
        format!("drop {:.3} m, {} violations, {:.1?}", s.max_z_drop_m, s.violation_count, elapsed)
    })?;
    let end = if s.completed { "completed".to_string() } else { format!("aborted: {}", s.failure) };
    Ok(format!(
        "z drop {:.3} m, {} violating ticks, {:.2} s, {end}",
        s.max_z_drop_m,
        s.violation_count,
        elapsed.as_secs_f64()
    ))
}

fn aware_pitch(runs: &Runs) -> Outcome {
    let conv = metrics(&runs.pitch6[0], TRANSIENT_S).map_err(|e| e.to_string())?;
    let s = metrics(&runs.pitch6[1], TRANSIENT_S).map_err(|e| e.to_string())?;
    let limit = 0.3 * conv.max_z_drop_m;
    ensure(s.completed, || format!("aborted: {}", s.failure))?;
    ensure(s.violation_count == 0 && s.max_z_deviation_m <= limit && s.mean_efficiency >= 0.90, || {
        format!(
            "{} violations, max |z - z_ref| {:.4} m (limit {limit:.4}), mean eta {:.4}",
            s.violation_count, s.max_z_deviation_m, s.mean_efficiency
        )
    })?;
    Ok(format!(
        "0 violations, max |z - z_ref| {:.4} m <= {limit:.4} m, mean eta {:.4}",
        s.max_z_deviation_m, s.mean_efficiency
    ))
}

/// Pairs whose wake reaches the neighbor when every module thrusts along the body-frame
/// direction of world up at the end of rotation `k`.
fn expected_pairs(scenario: &Scenario, k: usize, o_min: f64) -> BTreeSet<(usize, usize)> {
    let seg = scenario.trajectory.rotations[k];
    let r = UnitQuaternion::from_axis_angle(&seg.axis, seg.to);
    let flow = -(r.inverse() * Vec3::z());
    let cfg = &scenario.platform;
    ordered_pairs(cfg.n_generators)
        .filter(|&(i, j)| {
            let d = cfg.mount_positions[j] - cfg.mount_positions[i];
            let proj = d.dot(&flow);
            proj > 0.0 && d.norm_squared() - proj * proj < o_min * o_min
        })
        .collect()
}

/// First allocation tick at which one of `pairs` is gated and within twice `o_min`.
fn first_engagement(run: &SimRun, pairs: &BTreeSet<(usize, usize)>, o_min: f64) -> Option<f64> {
    let n = run.log.n_generators;
    let rows: Vec<usize> = ordered_pairs(n)
        .enumerate()
        .filter(|(_, p)| pairs.contains(p))
        .map(|(row, _)| row)
        .collect();
    run.log
        .records
        .iter()
        .filter(|r| r.alloc_tick)
        .find(|r| rows.iter().any(|&k| r.bounds[k] > 0.0 && r.constraints[k] < 4.0 * o_min * o_min))
        .map(|r| r.t)
}

fn two_events(runs: &Runs) -> Outcome {
    let scenario = common::scenario("two_event4.toml");
    let o_min = scenario.allocator.o_min_m;
    let [conv, aware] = &runs.two_event4;
    let second = scenario.trajectory.rotations[2];
    let window_end = scenario.trajectory.rotations[3].end;
    let conv_detail = if conv.diverged() {
        let t = conv.log.records.last().map(|r| r.t).unwrap_or(0.0);
        format!("conventional diverged at {t:.2} s")
    } else {
        let e = max_error_between(&conv.log, second.start, window_end);
        ensure(e > 0.15, || format!("conventional completed with {e:.3} m error at the second event"))?;
        format!("conventional error {e:.3} m at the second event")
    };
    let s = metrics(aware, TRANSIENT_S).map_err(|e| e.to_string())?;
    ensure(s.completed && s.rms_position_error_m <= 0.05, || {
        format!("aware completed {}, rms {:.4} m {}", s.completed, s.rms_position_error_m, s.failure)
    })?;

    let first_pairs = expected_pairs(&scenario, 0, o_min);
    let second_pairs = expected_pairs(&scenario, 2, o_min);
    ensure(!first_pairs.is_empty() && !second_pairs.is_empty() && first_pairs.is_disjoint(&second_pairs), || {
        format!("event pairs {first_pairs:?} and {second_pairs:?}")
    })?;
    let t1 = first_engagement(aware, &first_pairs, o_min).ok_or("first event never engaged")?;
    let t2 = first_engagement(aware, &second_pairs, o_min).ok_or("second event never engaged")?;
    ensure(t1 < t2 && t1 >= scenario.trajectory.rotations[0].start && t2 >= second.start, || {
        format!("events engaged at {t1:.2} s and {t2:.2} s")
    })?;
    let one = |p: &BTreeSet<(usize, usize)>| {
        p.iter().map(|(i, j)| format!("{}->{}", i + 1, j + 1)).collect::<Vec<_>>().join(" ")
    };
    Ok(format!(
        "{conv_detail}; aware rms {:.4} m; events {} at {t1:.2} s then {} at {t2:.2} s",
        s.rms_position_error_m,
        one(&first_pairs),
        one(&second_pairs)
    ))
}

fn conventional_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let options = QpOptions::default();
    let mut calls = 0;
    for seq in 0..1000 {
        let cfg = if seq % 2 == 0 { PlatformConfig::four() } else { PlatformConfig::six() };
        let n = cfg.n_generators;
        let m = build_w(&cfg).map_err(|e| e.to_string())?;
        let w = AllocatorWeights::diagonal(n, 1.0, 1e4, 1e-2, 0.0, 0.0);
        let mg = cfg.total_mass() * GRAVITY;
        let mut x_a = cfg.hover_allocation();
        let mut x_b = x_a.clone();
        for _ in 0..5 {
            let f = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), mg + rng.random_range(-1.0..1.0));
            let tau = Vec3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
            let u = Wrench::new(f, tau);
            let a = allocate(&u, &x_a, &w, &m, &cfg, &options).map_err(|e| format!("sequence {seq}: {e}"))?;
            let b = allocate_conventional(&u, &x_b, &w, &m, &cfg, &options).map_err(|e| format!("sequence {seq}: {e}"))?;
            ensure(a == b, || format!("sequence {seq}: outputs differ"))?;
            x_a = a.x;
            x_b = b.x;
            calls += 1;
        }
    }
    Ok(format!("1000 sequences, {calls} calls, identical results"))
}

fn roundtrips_and_gating() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = PlatformConfig::six();
    let mixer = QuadMixer::from_config(&cfg);
    let mut worst_mix: f64 = 0.0;
    for _ in 0..1000 {
        let t: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.01..0.14));
        let (thrust, torque) = mixer.forward(&t);
        let out = mixer.mix(thrust, &torque, cfg.max_prop_thrust);
        ensure(!out.saturated, || format!("mixer saturated on {t:?}"))?;
        for k in 0..4 {
            worst_mix = worst_mix.max((out.thrusts[k] - t[k]).abs());
        }
    }
    let mut worst_ik: f64 = 0.0;
    for _ in 0..1000 {
        let x = random_allocation(&mut rng, 6);
        let back = inverse_kinematics(&forces_from_x(&x), &x).map_err(|e| e.to_string())?;
        worst_ik = worst_ik.max((back.x.as_vector() - x.as_vector()).amax());
    }
    ensure(worst_mix <= 1e-10 && worst_ik <= 1e-10, || {
        format!("mixer roundtrip {worst_mix:.2e}, IK roundtrip {worst_ik:.2e}")
    })?;

    let o_min = 0.07;
    let mut cases = 0;
    for platform in [PlatformConfig::four(), PlatformConfig::six()] {
        let n = platform.n_generators;
        let level = constraint_bound(&platform, &AllocationVector::level(n, 0.5), o_min);
        ensure(level.iter().all(|b| *b == 0.0), || "level pose has gated rows".to_string())?;
        cases += 1;
        for (row, (i, j)) in ordered_pairs(n).enumerate() {
            let d = platform.mount_positions[j] - platform.mount_positions[i];
            for (sign, expected) in [(-1.0, o_min * o_min), (1.0, 0.0)] {
                // Thrust axis against d blows the wake of i straight at j; along d blows it away.
                let (a, b, t) = dwa_core::allocation::ik_single(&(d * sign), i).map_err(|e| e.to_string())?;
                let mut x = AllocationVector::level(n, 0.5);
                x.set(i, a, b, t);
                let bounds = constraint_bound(&platform, &x, o_min);
                ensure(bounds[row] == expected, || {
                    format!("pair {}->{} sign {sign}: bound {}", i + 1, j + 1, bounds[row])
                })?;
                cases += 1;
            }
        }
    }
    Ok(format!(
        "mixer {worst_mix:.1e}, IK {worst_ik:.1e}, {cases} gating cases"
    ))
}

fn csv_bytes(run: &SimRun) -> Vec<u8> {
    let mut out = Vec::new();
    sim::write_csv(&run.log, &mut out, None).expect("writing to memory");
    out
}

fn determinism(runs: &Runs) -> Outcome {
    let mut checked = Vec::new();
    for (file, mode, earlier) in [
        ("hover4.toml", AllocatorMode::DownwashAware, &runs.hover4[1]),
        ("pitch6.toml", AllocatorMode::Conventional, &runs.pitch6[0]),
        ("two_event4.toml", AllocatorMode::DownwashAware, &runs.two_event4[1]),
    ] {
        let again = sim::run(&with_mode(common::scenario(file), mode));
        ensure(csv_bytes(earlier) == csv_bytes(&again), || format!("{file} {mode}: logs differ"))?;
        checked.push(format!("{file} {mode}"));
    }
    let mut noisy = with_mode(common::scenario("hover6.toml"), AllocatorMode::DownwashAware);
    noisy.seed = 42;
    noisy.noise.position_m = 1e-3;
    noisy.noise.velocity_m_per_s = 1e-2;
    noisy.noise.attitude_rad = 1e-3;
    noisy.noise.rate_rad_per_s = 1e-2;
    let a = csv_bytes(&sim::run(&noisy));
    let b = csv_bytes(&sim::run(&noisy));
    ensure(a == b, || "noisy hover6 logs differ".to_string())?;
    noisy.seed = 43;
    let c = csv_bytes(&sim::run(&noisy));
    ensure(a != c, || "changing the seed did not change the noisy log".to_string())?;
    checked.push("noisy hover6 seed 42".to_string());
    Ok(format!("byte-identical: {}", checked.join(", ")))
}

fn main() -> ExitCode {
    let hover4 = run_both("hover4.toml").0;
    let hover6 = sim::run(&common::scenario("hover6.toml"));
    let (pitch6, pitch6_conv_time) = run_both("pitch6.toml");
    let two_event4 = run_both("two_event4.toml").0;
    let runs = Runs {
        hover4,
        hover6,
        pitch6,
        pitch6_conv_time,
        two_event4,
    };

    let results: [(&str, Outcome); 10] = [
        ("exact wrench reconstruction", exact_reconstruction(&runs)),
        ("jacobians", jacobians()),
        ("qp kernel", qp_kernel()),
        ("hover efficiency", hover_efficiency(&runs)),
        ("conventional pitch", conventional_pitch(&runs)),
        ("downwash-aware pitch", aware_pitch(&runs)),
        ("two-event scenario", two_events(&runs)),
        ("conventional equivalence", conventional_equivalence()),
        ("roundtrips and gating", roundtrips_and_gating()),
        ("determinism", determinism(&runs)),
    ];
    let mut failed = 0;
    for (k, (name, outcome)) in results.iter().enumerate() {
        match outcome {
            Ok(detail) => println!("criterion {} PASS ({name}): {detail}", k + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL ({name}): {detail}", k + 1);
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
