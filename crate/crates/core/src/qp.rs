//! Dense convex QP kernel.
//!
//! Solves
//!
//! ```text
//!     minimize    1/2 x' H x + f' x
//!     subject to  A_eq x  = b_eq
//!                 A_in x >= b_in
//!                 lb <= x <= ub
//! ```
//!
//! with a primal active-set method. A feasible start is found with a single elastic
//! variable `t in [0, 1]` that scales the initial constraint violation: the point
//! `(x0, 1)` is feasible for the relaxed problem by construction and `t` is driven to
//! its lower bound. The same active-set loop is used for both phases, so every
//! constraint in the final working set holds with equality and every other constraint
//! holds exactly at termination (up to round-off).

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::QpError;

/// Problem data. `H` is symmetrized on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem; add constraints with the `with_*` builders.
    pub fn new(h: DMatrix<f64>, f: DVector<f64>) -> Self {
        let n = f.len();
        let h = (&h + h.transpose()) * 0.5;
        Self {
            h,
            f,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
            lb: DVector::from_element(n, f64::NEG_INFINITY),
            ub: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_in = a;
        self.b_in = b;
        self
    }

    pub fn with_bounds(mut self, lb: DVector<f64>, ub: DVector<f64>) -> Self {
        self.lb = lb;
        self.ub = ub;
        self
    }

    pub fn n(&self) -> usize {
        self.f.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.f.dot(x)
    }

    /// Largest constraint violation at `x`.
    pub fn primal_residual(&self, x: &DVector<f64>) -> f64 {
        let mut r: f64 = 0.0;
        if self.a_eq.nrows() > 0 {
            r = r.max((&self.a_eq * x - &self.b_eq).amax());
        }
        if self.a_in.nrows() > 0 {
            let s = &self.a_in * x - &self.b_in;
            r = r.max(s.iter().fold(0.0, |m, v| m.max(-v)));
        }
        for i in 0..x.len() {
            r = r.max(self.lb[i] - x[i]).max(x[i] - self.ub[i]);
        }
        r
    }

    fn validate(&self) -> Result<(), QpError> {
        let n = self.n();
        let bad = |what: &str| Err(QpError::InvalidProblem(what.to_string()));
        if self.h.nrows() != n || self.h.ncols() != n {
            return bad("H is not n x n");
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return bad("equality dimensions");
        }
        if self.a_in.ncols() != n || self.a_in.nrows() != self.b_in.len() {
            return bad("inequality dimensions");
        }
        if self.lb.len() != n || self.ub.len() != n {
            return bad("bound dimensions");
        }
        if (0..n).any(|i| self.lb[i] > self.ub[i]) {
            return bad("lb > ub");
        }
        let finite = self.h.iter().chain(self.f.iter()).chain(self.a_eq.iter()).chain(self.b_eq.iter())
            .chain(self.a_in.iter())
            .chain(self.b_in.iter())
            .all(|v| v.is_finite());
        if !finite || self.lb.iter().chain(self.ub.iter()).any(|v| v.is_nan()) {
            return bad("non-finite data");
        }
        if self.a_eq.nrows() > 0 {
            let sv = self.a_eq.clone().svd(false, false).singular_values;
            let smax = sv.max();
            let rank = sv.iter().filter(|s| **s > 1e-12 * smax.max(1.0)).count();
            if rank < self.a_eq.nrows() {
                return bad("equality constraints are rank deficient");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    pub max_iter: usize,
    pub eps_abs: f64,
    pub eps_rel: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            max_iter: 1000,
            eps_abs: 1e-8,
            eps_rel: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub iterations: usize,
    /// Multipliers of the equality rows.
    pub y_eq: DVector<f64>,
    /// Multipliers of the inequality rows (non-negative at optimality).
    pub y_in: DVector<f64>,
    /// Multipliers of the lower bounds (non-negative at optimality).
    pub z_lower: DVector<f64>,
    /// Multipliers of the upper bounds (non-negative at optimality).
    pub z_upper: DVector<f64>,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub complementarity: f64,
    /// True when `H` had to be shifted by `1e-10 I` to make it positive definite.
    pub regularized: bool,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }

    pub fn into_result(self) -> Result<Self, QpError> {
        match self.status {
            QpStatus::Optimal => Ok(self),
            QpStatus::Infeasible => Err(QpError::Infeasible {
                residual: self.primal_residual,
            }),
            QpStatus::MaxIter => Err(QpError::MaxIter(self.iterations)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bound {
    Free,
    Lower,
    Upper,
}

/// Working set of one active-set run.
#[derive(Debug, Clone)]
struct WorkingSet {
    bounds: Vec<Bound>,
    rows: Vec<usize>,
}

enum LoopEnd {
    Optimal,
    MaxIter,
}

/// Borrowed view of the data the active-set loop needs.
struct Data<'a> {
    h: &'a DMatrix<f64>,
    f: &'a DVector<f64>,
    a_eq: &'a DMatrix<f64>,
    a_in: &'a DMatrix<f64>,
    b_in: &'a DVector<f64>,
    lb: &'a DVector<f64>,
    ub: &'a DVector<f64>,
}

struct Multipliers {
    y_eq: DVector<f64>,
    y_in: DVector<f64>,
    z_lower: DVector<f64>,
    z_upper: DVector<f64>,
}

const REGULARIZATION: f64 = 1e-10;
const PD_THRESHOLD: f64 = 1e-12;
const PHASE_ONE_WEIGHT: f64 = 1e-6;

/// Solves `problem` from a cold start.
pub fn solve(problem: &QpProblem, options: &QpOptions) -> Result<QpSolution, QpError> {
    solve_from(problem, options, None)
}

/// Solves `problem`, starting the search at `start` when given (clamped to the bounds).
///
/// Identical inputs always produce bit-identical outputs.
pub fn solve_from(
    problem: &QpProblem,
    options: &QpOptions,
    start: Option<&DVector<f64>>,
) -> Result<QpSolution, QpError> {
    problem.validate()?;
    let n = problem.n();

    let mut h = problem.h.clone();
    let shifted = h.clone() - DMatrix::identity(n, n) * PD_THRESHOLD;
    let regularized = n > 0 && Cholesky::new(shifted).is_none();
    if regularized {
        log::debug!("QP Hessian not positive definite, adding {REGULARIZATION:e} I");
        for i in 0..n {
            h[(i, i)] += REGULARIZATION;
        }
    }

    let mut x = match start {
        Some(s) if s.len() == n => s.clone(),
        _ => DVector::zeros(n),
    };
    for i in 0..n {
        x[i] = x[i].clamp(problem.lb[i], problem.ub[i]);
        if !x[i].is_finite() {
            x[i] = if problem.lb[i].is_finite() { problem.lb[i] } else { problem.ub[i] };
        }
    }

    let feas_tol = 1e-12 * (1.0 + x.amax());
    let eq_res = &problem.b_eq - &problem.a_eq * &x;
    let in_viol = (&problem.b_in - &problem.a_in * &x).map(|v| v.max(0.0));
    let needs_phase_one = eq_res.iter().any(|v| v.abs() > feas_tol) || in_viol.iter().any(|v| *v > feas_tol);

    let mut iterations = 0;
    let mut ws = WorkingSet {
        bounds: (0..n)
            .map(|i| if problem.lb[i] == problem.ub[i] { Bound::Lower } else { Bound::Free })
            .collect(),
        rows: Vec::new(),
    };

    if needs_phase_one {
        let (x1, ws1, iters, t) = phase_one(problem, options, &x, &eq_res, &in_viol)?;
        iterations += iters;
        let scale = eq_res.amax().max(in_viol.amax());
        if t * scale > 1e-9 * (1.0 + scale) || !x1.iter().all(|v| v.is_finite()) {
            let mut sol = finish(problem, &h, x1, QpStatus::Infeasible, iterations, None, regularized);
            sol.primal_residual = sol.primal_residual.max(t * scale);
            return Ok(sol);
        }
        x = x1;
        ws = ws1;
    }

    let data = Data {
        h: &h,
        f: &problem.f,
        a_eq: &problem.a_eq,
        a_in: &problem.a_in,
        b_in: &problem.b_in,
        lb: &problem.lb,
        ub: &problem.ub,
    };
    let (end, iters, mult) = active_set_loop(&data, options, &mut x, &mut ws, options.max_iter);
    iterations += iters;
    let status = match end {
        LoopEnd::Optimal => QpStatus::Optimal,
        LoopEnd::MaxIter => QpStatus::MaxIter,
    };
    Ok(finish(problem, &h, x, status, iterations, Some(mult), regularized))
}

/// Finds a feasible point by minimizing the elastic scale `t`.
fn phase_one(
    problem: &QpProblem,
    options: &QpOptions,
    x0: &DVector<f64>,
    eq_res: &DVector<f64>,
    in_viol: &DVector<f64>,
) -> Result<(DVector<f64>, WorkingSet, usize, f64), QpError> {
    let n = problem.n();
    let m_eq = problem.a_eq.nrows();
    let m_in = problem.a_in.nrows();

    // Variables (x, t); objective w/2 |x - x0|^2 + w/2 t^2 + t.
    let h = DMatrix::identity(n + 1, n + 1) * PHASE_ONE_WEIGHT;
    let mut f = DVector::zeros(n + 1);
    for i in 0..n {
        f[i] = -PHASE_ONE_WEIGHT * x0[i];
    }
    f[n] = 1.0;
    let mut a_eq = DMatrix::zeros(m_eq, n + 1);
    a_eq.view_mut((0, 0), (m_eq, n)).copy_from(&problem.a_eq);
    a_eq.set_column(n, eq_res);
    let mut a_in = DMatrix::zeros(m_in, n + 1);
    a_in.view_mut((0, 0), (m_in, n)).copy_from(&problem.a_in);
    a_in.set_column(n, in_viol);
    let mut lb = DVector::zeros(n + 1);
    let mut ub = DVector::from_element(n + 1, 1.0);
    lb.rows_mut(0, n).copy_from(&problem.lb);
    ub.rows_mut(0, n).copy_from(&problem.ub);

    let mut x = DVector::zeros(n + 1);
    x.rows_mut(0, n).copy_from(x0);
    x[n] = 1.0;

    let mut ws = WorkingSet {
        bounds: (0..=n)
            .map(|i| if lb[i] == ub[i] { Bound::Lower } else { Bound::Free })
            .collect(),
        rows: Vec::new(),
    };
    let data = Data {
        h: &h,
        f: &f,
        a_eq: &a_eq,
        a_in: &a_in,
        b_in: &problem.b_in,
        lb: &lb,
        ub: &ub,
    };
    let (end, iters, _) = active_set_loop(&data, options, &mut x, &mut ws, options.max_iter);
    if let LoopEnd::MaxIter = end {
        return Err(QpError::MaxIter(iters));
    }
    let t = x[n];
    let mut bounds = ws.bounds;
    let t_fixed = bounds.pop() != Some(Bound::Free);
    if !t_fixed && t > 0.0 {
        // t is not pinned at zero: the original constraints cannot all hold.
        return Ok((x.rows(0, n).into_owned(), WorkingSet { bounds, rows: ws.rows }, iters, t));
    }
    let mut xo = x.rows(0, n).into_owned();
    for i in 0..n {
        match bounds[i] {
            Bound::Lower => xo[i] = problem.lb[i],
            Bound::Upper => xo[i] = problem.ub[i],
            Bound::Free => {}
        }
    }
    let t = if t_fixed { 0.0 } else { t };
    Ok((xo, WorkingSet { bounds, rows: ws.rows }, iters, t))
}

/// Primal active-set iterations from a feasible `x`. Returns the multipliers of the
/// final working set.
fn active_set_loop(
    d: &Data<'_>,
    options: &QpOptions,
    x: &mut DVector<f64>,
    ws: &mut WorkingSet,
    max_iter: usize,
) -> (LoopEnd, usize, Multipliers) {
    let n = x.len();
    let m_eq = d.a_eq.nrows();
    let m_in = d.a_in.nrows();
    let mut at_subspace_min = false;
    let mut iter = 0;

    loop {
        let g = d.h * &*x + d.f;
        let Some((p, lam)) = kkt_step(d, &g, ws) else {
            log::warn!("singular KKT system in active-set iteration {iter}");
            return (LoopEnd::MaxIter, iter, zero_multipliers(n, m_eq, m_in));
        };
        let mult = expand_multipliers(d, &g, ws, &lam);
        let p_norm = p.amax();
        let step_tol = 1e-13 * (1.0 + x.amax());

        if at_subspace_min || p_norm <= step_tol {
            at_subspace_min = false;
            let dual_tol = options.eps_abs + options.eps_rel * g.amax().max(1.0);
            // Most negative multiplier; rows are indexed before bounds for tie-breaks.
            let mut worst: Option<(f64, Drop)> = None;
            for (pos, &k) in ws.rows.iter().enumerate() {
                let v = mult.y_in[k];
                if v < -dual_tol && worst.as_ref().is_none_or(|(w, _)| v < *w) {
                    worst = Some((v, Drop::Row(pos)));
                }
            }
            for i in 0..n {
                let v = match ws.bounds[i] {
                    Bound::Lower if d.lb[i] != d.ub[i] => mult.z_lower[i],
                    Bound::Upper => mult.z_upper[i],
                    _ => continue,
                };
                if v < -dual_tol && worst.as_ref().is_none_or(|(w, _)| v < *w) {
                    worst = Some((v, Drop::Bound(i)));
                }
            }
            match worst {
                None => return (LoopEnd::Optimal, iter, mult),
                Some((_, Drop::Row(pos))) => {
                    ws.rows.remove(pos);
                }
                Some((_, Drop::Bound(i))) => ws.bounds[i] = Bound::Free,
            }
        } else {
            let mut step = 1.0;
            let mut blocking: Option<Block> = None;
            let in_ws: Vec<bool> = {
                let mut v = vec![false; m_in];
                for &k in &ws.rows {
                    v[k] = true;
                }
                v
            };
            for k in 0..m_in {
                if in_ws[k] {
                    continue;
                }
                let row = d.a_in.row(k);
                let ap = row.dot(&p.transpose());
                if ap < -1e-14 * row.norm() * p_norm {
                    let slack = row.dot(&x.transpose()) - d.b_in[k];
                    let s = (slack / -ap).max(0.0);
                    if s < step {
                        step = s;
                        blocking = Some(Block::Row(k));
                    }
                }
            }
            for i in 0..n {
                if ws.bounds[i] != Bound::Free || p[i] == 0.0 {
                    continue;
                }
                let s = if p[i] < 0.0 && d.lb[i].is_finite() {
                    ((d.lb[i] - x[i]) / p[i]).max(0.0)
                } else if p[i] > 0.0 && d.ub[i].is_finite() {
                    ((d.ub[i] - x[i]) / p[i]).max(0.0)
                } else {
                    continue;
                };
                if s < step {
                    step = s;
                    blocking = Some(if p[i] < 0.0 { Block::Lower(i) } else { Block::Upper(i) });
                }
            }
            x.axpy(step, &p, 1.0);
            match blocking {
                None => at_subspace_min = true,
                Some(Block::Row(k)) => ws.rows.push(k),
                Some(Block::Lower(i)) => {
                    x[i] = d.lb[i];
                    ws.bounds[i] = Bound::Lower;
                }
                Some(Block::Upper(i)) => {
                    x[i] = d.ub[i];
                    ws.bounds[i] = Bound::Upper;
                }
            }
        }

        iter += 1;
        if iter >= max_iter {
            let g = d.h * &*x + d.f;
            let mult = kkt_step(d, &g, ws)
                .map(|(_, lam)| expand_multipliers(d, &g, ws, &lam))
                .unwrap_or_else(|| zero_multipliers(n, m_eq, m_in));
            return (LoopEnd::MaxIter, iter, mult);
        }
    }
}

enum Drop {
    Row(usize),
    Bound(usize),
}

enum Block {
    Row(usize),
    Lower(usize),
    Upper(usize),
}

/// Solves the equality-constrained subproblem on the free variables:
/// `H p - A_w' lam = -g`, `A_w p = 0`, `p_fixed = 0`.
fn kkt_step(d: &Data<'_>, g: &DVector<f64>, ws: &WorkingSet) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = g.len();
    let free: Vec<usize> = (0..n).filter(|&i| ws.bounds[i] == Bound::Free).collect();
    let m_eq = d.a_eq.nrows();
    let nf = free.len();
    let mw = m_eq + ws.rows.len();
    let size = nf + mw;

    let mut k = DMatrix::zeros(size, size);
    let mut rhs = DVector::zeros(size);
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            k[(a, b)] = d.h[(i, j)];
        }
        rhs[a] = -g[i];
    }
    let row_of = |r: usize, j: usize| -> f64 {
        if r < m_eq {
            d.a_eq[(r, j)]
        } else {
            d.a_in[(ws.rows[r - m_eq], j)]
        }
    };
    for r in 0..mw {
        for (a, &j) in free.iter().enumerate() {
            let v = row_of(r, j);
            k[(nf + r, a)] = v;
            k[(a, nf + r)] = -v;
        }
    }

    let sol = if size == 0 {
        DVector::zeros(0)
    } else {
        let sol = k.lu().solve(&rhs)?;
        if !sol.iter().all(|v| v.is_finite()) {
            return None;
        }
        sol
    };
    let mut p = DVector::zeros(n);
    for (a, &i) in free.iter().enumerate() {
        p[i] = sol[a];
    }
    Some((p, sol.rows(nf, mw).into_owned()))
}

fn zero_multipliers(n: usize, m_eq: usize, m_in: usize) -> Multipliers {
    Multipliers {
        y_eq: DVector::zeros(m_eq),
        y_in: DVector::zeros(m_in),
        z_lower: DVector::zeros(n),
        z_upper: DVector::zeros(n),
    }
}

/// Full multiplier vectors from the working-set solve. Bound multipliers are the
/// remaining Lagrangian gradient on the fixed variables.
fn expand_multipliers(d: &Data<'_>, g: &DVector<f64>, ws: &WorkingSet, lam: &DVector<f64>) -> Multipliers {
    let n = g.len();
    let m_eq = d.a_eq.nrows();
    let mut m = zero_multipliers(n, m_eq, d.a_in.nrows());
    for r in 0..m_eq {
        m.y_eq[r] = lam[r];
    }
    for (pos, &k) in ws.rows.iter().enumerate() {
        m.y_in[k] = lam[m_eq + pos];
    }
    let fixed: Vec<usize> = (0..n).filter(|&i| ws.bounds[i] != Bound::Free).collect();
    if fixed.is_empty() {
        return m;
    }
    for &i in &fixed {
        let mut grad = g[i];
        for r in 0..m_eq {
            grad -= d.a_eq[(r, i)] * m.y_eq[r];
        }
        for &k in &ws.rows {
            grad -= d.a_in[(k, i)] * m.y_in[k];
        }
        match ws.bounds[i] {
            Bound::Lower if d.lb[i] == d.ub[i] => {
                if grad >= 0.0 {
                    m.z_lower[i] = grad;
                } else {
                    m.z_upper[i] = -grad;
                }
            }
            Bound::Lower => m.z_lower[i] = grad,
            Bound::Upper => m.z_upper[i] = -grad,
            Bound::Free => {}
        }
    }
    m
}

fn finish(
    problem: &QpProblem,
    h: &DMatrix<f64>,
    x: DVector<f64>,
    status: QpStatus,
    iterations: usize,
    mult: Option<Multipliers>,
    regularized: bool,
) -> QpSolution {
    let n = problem.n();
    let mult = mult.unwrap_or_else(|| zero_multipliers(n, problem.a_eq.nrows(), problem.a_in.nrows()));
    let primal_residual = problem.primal_residual(&x);
    let lagrangian_grad = h * &x + &problem.f
        - problem.a_eq.transpose() * &mult.y_eq
        - problem.a_in.transpose() * &mult.y_in
        - &mult.z_lower
        + &mult.z_upper;
    let dual_residual = if n > 0 { lagrangian_grad.amax() } else { 0.0 };
    let mut complementarity: f64 = 0.0;
    if problem.a_in.nrows() > 0 {
        let slack = &problem.a_in * &x - &problem.b_in;
        for k in 0..slack.len() {
            complementarity = complementarity.max((mult.y_in[k] * slack[k]).abs());
        }
    }
    for i in 0..n {
        if mult.z_lower[i] != 0.0 {
            complementarity = complementarity.max((mult.z_lower[i] * (x[i] - problem.lb[i])).abs());
        }
        if mult.z_upper[i] != 0.0 {
            complementarity = complementarity.max((mult.z_upper[i] * (problem.ub[i] - x[i])).abs());
        }
    }
    QpSolution {
        objective: problem.objective(&x),
        x,
        status,
        iterations,
        y_eq: mult.y_eq,
        y_in: mult.y_in,
        z_lower: mult.z_lower,
        z_upper: mult.z_upper,
        primal_residual,
        dual_residual,
        complementarity,
        regularized,
    }
}
