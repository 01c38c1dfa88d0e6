//! Helpers shared by the integration tests: an independent reference QP solver, random
//! problem generators and scenario loading.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use dwa_core::config::load_scenario;
use dwa_core::qp::{QpProblem, QpSolution};
use dwa_core::sim::Scenario;
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

pub fn scenario_path(file: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(file)
}

pub fn scenario(file: &str) -> Scenario {
    load_scenario(&scenario_path(file)).unwrap_or_else(|e| panic!("{file}: {e}"))
}

/// Reference solution from [`admm`].
#[derive(Debug, Clone)]
pub struct Reference {
    pub x: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

/// Operator-splitting QP solver with `l <= A x <= u` constraints, step-size adaptation
/// and a tight stopping tolerance. Slow, but shares no code with the active-set kernel.
pub fn admm(p: &QpProblem, tol: f64, max_iter: usize) -> Option<Reference> {
    let n = p.n();
    let m_eq = p.a_eq.nrows();
    let m_in = p.a_in.nrows();
    let m = m_eq + m_in + n;
    let mut a = DMatrix::zeros(m, n);
    let mut lo = DVector::zeros(m);
    let mut hi = DVector::zeros(m);
    a.view_mut((0, 0), (m_eq, n)).copy_from(&p.a_eq);
    a.view_mut((m_eq, 0), (m_in, n)).copy_from(&p.a_in);
    a.view_mut((m_eq + m_in, 0), (n, n)).fill_with_identity();
    for r in 0..m_eq {
        lo[r] = p.b_eq[r];
        hi[r] = p.b_eq[r];
    }
    for r in 0..m_in {
        lo[m_eq + r] = p.b_in[r];
        hi[m_eq + r] = f64::INFINITY;
    }
    for i in 0..n {
        lo[m_eq + m_in + i] = p.lb[i];
        hi[m_eq + m_in + i] = p.ub[i];
    }
    let sigma = 1e-8;
    let alpha = 1.6;
    let mut rho = 0.1;
    let row_scale = |r: usize| if lo[r] == hi[r] { 1e3 } else { 1.0 };
    let factor = |rho: f64| {
        let weights = DVector::from_fn(m, |r, _| rho * row_scale(r));
        let mut k = &p.h + DMatrix::identity(n, n) * sigma;
        k += a.transpose() * DMatrix::from_diagonal(&weights) * &a;
        (Cholesky::new(k).expect("ADMM system is positive definite"), weights)
    };
    let (mut chol, mut rho_vec) = factor(rho);
    let mut x = DVector::zeros(n);
    let mut z = DVector::zeros(m);
    let mut y = DVector::zeros(m);
    for it in 1..=max_iter {
        let rhs = &x * sigma - &p.f + a.transpose() * (rho_vec.component_mul(&z) - &y);
        let x_tilde = chol.solve(&rhs);
        let z_tilde = &a * &x_tilde;
        let x_next = &x_tilde * alpha + &x * (1.0 - alpha);
        let z_relaxed = &z_tilde * alpha + &z * (1.0 - alpha);
        let z_next = DVector::from_fn(m, |r, _| (z_relaxed[r] + y[r] / rho_vec[r]).clamp(lo[r], hi[r]));
        y += rho_vec.component_mul(&(&z_relaxed - &z_next));
        x = x_next;
        z = z_next;

        if it % 25 == 0 {
            let ax = &a * &x;
            let r_prim = (&ax - &z).amax();
            let grad = &p.h * &x + &p.f + a.transpose() * &y;
            let r_dual = grad.amax();
            let scale_p = ax.amax().max(z.amax()).max(1.0);
            let scale_d = (&p.h * &x).amax().max(p.f.amax()).max((a.transpose() * &y).amax()).max(1.0);
            if r_prim <= tol * scale_p && r_dual <= tol * scale_d {
                return Some(Reference {
                    objective: p.objective(&x),
                    x,
                    iterations: it,
                    primal_residual: r_prim,
                    dual_residual: r_dual,
                });
            }
            let ratio = ((r_prim / scale_p) / (r_dual / scale_d).max(1e-300)).sqrt();
            if it % 200 == 0 && !(0.2..=5.0).contains(&ratio) {
                rho = (rho * ratio).clamp(1e-6, 1e6);
                (chol, rho_vec) = factor(rho);
            }
        }
    }
    None
}

/// Independently evaluated KKT residuals of a returned solution:
/// stationarity, primal feasibility, dual sign and complementarity.
pub fn kkt_residuals(p: &QpProblem, s: &QpSolution) -> [f64; 4] {
    let x = &s.x;
    let stationarity = (&p.h * x + &p.f
        - p.a_eq.transpose() * &s.y_eq
        - p.a_in.transpose() * &s.y_in
        - &s.z_lower
        + &s.z_upper)
        .amax();
    let mut primal: f64 = 0.0;
    if p.a_eq.nrows() > 0 {
        primal = primal.max((&p.a_eq * x - &p.b_eq).amax());
    }
    let slack = &p.a_in * x - &p.b_in;
    primal = slack.iter().fold(primal, |r, v| r.max(-v));
    for i in 0..x.len() {
        primal = primal.max(p.lb[i] - x[i]).max(x[i] - p.ub[i]);
    }
    let dual_sign = s
        .y_in
        .iter()
        .chain(s.z_lower.iter())
        .chain(s.z_upper.iter())
        .fold(0.0f64, |r, v| r.max(-v));
    let mut comp: f64 = 0.0;
    for k in 0..slack.len() {
        comp = comp.max((s.y_in[k] * slack[k]).abs());
    }
    for i in 0..x.len() {
        if s.z_lower[i] != 0.0 {
            comp = comp.max((s.z_lower[i] * (x[i] - p.lb[i])).abs());
        }
        if s.z_upper[i] != 0.0 {
            comp = comp.max((s.z_upper[i] * (p.ub[i] - x[i])).abs());
        }
    }
    [stationarity, primal, dual_sign, comp]
}

fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Random strictly convex QP with up to `max_n` variables and equality, inequality and
/// box constraints, built around a known feasible point.
pub fn random_qp<R: Rng>(rng: &mut R, max_n: usize) -> QpProblem {
    let n = rng.random_range(2..=max_n);
    let k = rng.random_range(1..=n);
    let m = gaussian_matrix(rng, k, n);
    let h = m.transpose() * m + DMatrix::identity(n, n) * rng.random_range(0.01..1.0);
    let f = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
    let x0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));

    let m_eq = rng.random_range(0..=n / 3);
    let a_eq = gaussian_matrix(rng, m_eq, n);
    let b_eq = &a_eq * &x0;
    let m_in = rng.random_range(0..=n);
    let a_in = gaussian_matrix(rng, m_in, n);
    let b_in = &a_in * &x0 - DVector::from_fn(m_in, |_, _| rng.random_range(0.0..1.0));
    let lb = DVector::from_fn(n, |i, _| {
        if rng.random_bool(0.2) {
            f64::NEG_INFINITY
        } else {
            x0[i] - rng.random_range(0.0..1.5)
        }
    });
    let ub = DVector::from_fn(n, |i, _| {
        if rng.random_bool(0.2) {
            f64::INFINITY
        } else {
            x0[i] + rng.random_range(0.0..1.5)
        }
    });
    QpProblem::new(h, f)
        .with_equalities(a_eq, b_eq)
        .with_inequalities(a_in, b_in)
        .with_bounds(lb, ub)
}
