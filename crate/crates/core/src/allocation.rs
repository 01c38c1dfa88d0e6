//! Nullspace QP control allocation.
//!
//! Stacking the vectored thrusts `F = [F_1; ...; F_N]` turns the wrench map into the
//! constant linear system `u = W F`. Every solution is `F = W^+ u + N_W Z`. Each control
//! tick linearizes `F(X)` around the previous actuator state and solves one QP for the
//! increment `dX`, a slack `s` on the linearized equality and the nullspace coordinates `Z`.
//! The result is then projected back onto the exact solution set and converted to gimbal
//! angles and thrust magnitudes.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::downwash::{constraint_bound, constraint_jacobian, constraint_vector};
use crate::error::{AllocError, QpError};
use crate::frames::{skew, AllocationVector, Vec3, Wrench};
use crate::platform::PlatformConfig;
use crate::qp::{self, QpOptions, QpProblem, QpSolution, QpStatus};

/// Thrust below which inverse kinematics keeps the previous gimbal angles [N].
pub const T_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AllocatorMode {
    Conventional,
    DownwashAware,
}

impl std::fmt::Display for AllocatorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Conventional => "conventional",
            Self::DownwashAware => "downwash-aware",
        })
    }
}

impl std::str::FromStr for AllocatorMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "conventional" => Ok(Self::Conventional),
            "downwash-aware" => Ok(Self::DownwashAware),
            other => Err(format!("unknown allocator mode '{other}'")),
        }
    }
}

/// QP weights. The objective is `dX' Q1 dX + s' Q2 s + Z' Q3 Z + gamma * sum(dT)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocatorWeights {
    pub q1: DMatrix<f64>,
    pub q2: DMatrix<f64>,
    pub q3: DMatrix<f64>,
    pub gamma: f64,
    /// Minimum wake clearance [m].
    pub o_min: f64,
}

impl AllocatorWeights {
    /// Scalar multiples of the identity.
    pub fn diagonal(n: usize, q1: f64, q2: f64, q3: f64, gamma: f64, o_min: f64) -> Self {
        Self {
            q1: DMatrix::identity(3 * n, 3 * n) * q1,
            q2: DMatrix::identity(3 * n, 3 * n) * q2,
            q3: DMatrix::identity(3 * n - 6, 3 * n - 6) * q3,
            gamma,
            o_min,
        }
    }

    pub fn defaults(n: usize) -> Self {
        Self::diagonal(n, 1.0, 1e4, 1e-2, 0.1, 0.07)
    }

    /// Same weights with the downwash rows and the thrust-sum term switched off.
    pub fn conventional(&self) -> Self {
        Self {
            gamma: 0.0,
            o_min: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self, n: usize) -> Result<(), String> {
        let dims = [(&self.q1, 3 * n, "Q1"), (&self.q2, 3 * n, "Q2"), (&self.q3, 3 * n - 6, "Q3")];
        for (q, size, name) in dims {
            if q.nrows() != size || q.ncols() != size {
                return Err(format!("{name} must be {size}x{size}"));
            }
            if !q.iter().all(|v| v.is_finite()) {
                return Err(format!("{name} has non-finite entries"));
            }
            if (q - q.transpose()).amax() > 1e-12 * q.amax().max(1.0) {
                return Err(format!("{name} is not symmetric"));
            }
            let min_eig = SymmetricEigen::new(q.clone()).eigenvalues.min();
            if min_eig < -1e-12 * q.amax().max(1.0) {
                return Err(format!("{name} is not positive semi-definite"));
            }
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err("gamma must be non-negative".into());
        }
        if !(self.o_min >= 0.0 && self.o_min.is_finite()) {
            return Err("o_min must be non-negative".into());
        }
        Ok(())
    }
}

/// Constant matrices of the linear allocation problem.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationMatrixSet {
    /// `W`, 6 x 3N.
    pub w: DMatrix<f64>,
    /// `W^+`, 3N x 6.
    pub w_pinv: DMatrix<f64>,
    /// Orthonormal nullspace basis `N_W`, 3N x (3N - 6).
    pub nullspace: DMatrix<f64>,
    /// `N_W^+ = N_W^T`.
    pub nullspace_pinv: DMatrix<f64>,
}

/// Builds `W` with blocks `[I; skew(d_i)]` and its pseudoinverse and nullspace.
pub fn build_w(cfg: &PlatformConfig) -> Result<AllocationMatrixSet, AllocError> {
    let n = cfg.n_generators;
    let mut w = DMatrix::zeros(6, 3 * n);
    for (i, d) in cfg.mount_positions.iter().enumerate() {
        w.view_mut((0, 3 * i), (3, 3)).fill_with_identity();
        w.view_mut((3, 3 * i), (3, 3)).copy_from(&skew(d));
    }
    // Padding W to a square matrix makes the SVD return the full right singular basis.
    let mut padded = DMatrix::zeros(3 * n, 3 * n);
    padded.view_mut((0, 0), (6, 3 * n)).copy_from(&w);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..3 * n).collect();
    order.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));
    let largest = svd.singular_values[order[0]];
    let tol = largest * 3.0 * n as f64 * f64::EPSILON * 10.0;
    let rank = order.iter().filter(|&&k| svd.singular_values[k] > tol).count();
    if rank < 6 {
        return Err(AllocError::DegenerateGeometry { rank });
    }
    let mut nullspace = DMatrix::zeros(3 * n, 3 * n - 6);
    for (col, &k) in order[6..].iter().enumerate() {
        nullspace.set_column(col, &v_t.row(k).transpose());
    }
    let gram = &w * w.transpose();
    let gram_inv = gram
        .cholesky()
        .ok_or(AllocError::DegenerateGeometry { rank })?
        .inverse();
    let w_pinv = w.transpose() * gram_inv;
    let nullspace_pinv = nullspace.transpose();
    Ok(AllocationMatrixSet {
        w,
        w_pinv,
        nullspace,
        nullspace_pinv,
    })
}

/// Stacked vectored thrusts `F(X)`.
pub fn forces_from_x(x: &AllocationVector) -> DVector<f64> {
    let n = x.n_generators();
    let mut f = DVector::zeros(3 * n);
    for i in 0..n {
        f.fixed_rows_mut::<3>(3 * i).copy_from(&(x.thrust_axis(i) * x.thrust(i)));
    }
    f
}

/// Analytic Jacobian `dF/dX`, 3N x 3N.
pub fn jacobian_f(x: &AllocationVector) -> DMatrix<f64> {
    let n = x.n_generators();
    let mut jac = DMatrix::zeros(3 * n, 3 * n);
    for i in 0..n {
        let (sa, ca) = x.alpha(i).sin_cos();
        let (sb, cb) = x.beta(i).sin_cos();
        let t = x.thrust(i);
        let d_alpha = Vec3::new(0.0, -ca * cb, -sa * cb) * t;
        let d_beta = Vec3::new(cb, sa * sb, -ca * sb) * t;
        let d_thrust = Vec3::new(sb, -sa * cb, ca * cb);
        jac.view_mut((3 * i, i), (3, 1)).copy_from(&d_alpha);
        jac.view_mut((3 * i, n + i), (3, 1)).copy_from(&d_beta);
        jac.view_mut((3 * i, 2 * n + i), (3, 1)).copy_from(&d_thrust);
    }
    jac
}

/// Ratio of the resultant thrust to the sum of thrust magnitudes.
pub fn thrust_efficiency(x: &AllocationVector) -> Result<f64, AllocError> {
    let total = x.total_thrust();
    if !(total > 0.0) {
        return Err(AllocError::ZeroThrust);
    }
    let resultant: Vec3 = (0..x.n_generators()).map(|i| x.thrust_axis(i) * x.thrust(i)).sum();
    Ok((resultant.norm() / total).min(1.0))
}

/// Gimbal angles and thrust of one generator producing force `f`.
///
/// The twist comes from `asin`, so it stays in `[-pi/2, pi/2]`.
pub fn ik_single(f: &Vec3, index: usize) -> Result<(f64, f64, f64), AllocError> {
    let t = f.norm();
    if !t.is_finite() {
        return Err(AllocError::NonFinite);
    }
    if t < T_FLOOR {
        return Err(AllocError::IkSingular { index, thrust: t });
    }
    let alpha = (-f.y).atan2(f.z);
    let beta = (f.x / t).clamp(-1.0, 1.0).asin();
    Ok((alpha, beta, t))
}

/// Result of [`inverse_kinematics`].
#[derive(Debug, Clone, PartialEq)]
pub struct IkOutput {
    pub x: AllocationVector,
    /// Generators whose force fell below [`T_FLOOR`].
    pub singular: Vec<usize>,
}

/// Converts stacked forces into `X`. Tilt angles are unwrapped towards `previous`;
/// generators below the thrust floor keep their previous angles at `T_FLOOR`.
pub fn inverse_kinematics(f: &DVector<f64>, previous: &AllocationVector) -> Result<IkOutput, AllocError> {
    let n = previous.n_generators();
    assert_eq!(f.len(), 3 * n, "force vector length");
    let mut x = previous.clone();
    let mut singular = Vec::new();
    for i in 0..n {
        let fi = Vec3::new(f[3 * i], f[3 * i + 1], f[3 * i + 2]);
        match ik_single(&fi, i) {
            Ok((alpha, beta, t)) => {
                let prev = previous.alpha(i);
                let alpha = prev + crate::frames::wrap_angle(alpha - prev);
                x.set(i, alpha, beta, t);
            }
            Err(AllocError::IkSingular { .. }) => {
                singular.push(i);
                x.set(i, previous.alpha(i), previous.beta(i), T_FLOOR);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(IkOutput { x, singular })
}

/// How the downwash rows were treated when the full QP had no solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relaxation {
    None,
    /// Row targets reduced to what the rate limits allow in one tick.
    Scaled,
    /// Rows removed entirely.
    Dropped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationResult {
    /// Commanded `alpha^d, beta^d, T^d`.
    pub x: AllocationVector,
    /// Exact forces `F*` with `W F* = u^d`.
    pub forces: DVector<f64>,
    /// Nullspace coordinates `Z*`.
    pub z: DVector<f64>,
    pub slack: DVector<f64>,
    /// QP step `dX` before the exact projection; this is what the rate limits bound.
    pub step: DVector<f64>,
    pub efficiency: f64,
    pub qp_status: QpStatus,
    pub qp_iterations: usize,
    /// `O(X)` at the new command.
    pub constraints: DVector<f64>,
    /// Gated bounds `O_min` evaluated at the previous state.
    pub bounds: DVector<f64>,
    pub relaxation: Relaxation,
    pub ik_singular: Vec<usize>,
}

impl AllocationResult {
    /// Relative reconstruction error `|W F* - u| / max(1, |u|)`.
    pub fn wrench_error(&self, matrices: &AllocationMatrixSet, u_d: &Wrench) -> f64 {
        let u = DVector::from_column_slice(u_d.to_vector().as_slice());
        (&matrices.w * &self.forces - &u).norm() / u.norm().max(1.0)
    }
}

struct Linearization {
    x0: DVector<f64>,
    f0: DVector<f64>,
    jac: DMatrix<f64>,
    target: DVector<f64>,
}

fn linearize(u_d: &Wrench, x_prev: &AllocationVector, m: &AllocationMatrixSet) -> Linearization {
    let u = DVector::from_column_slice(u_d.to_vector().as_slice());
    Linearization {
        x0: x_prev.as_vector().clone(),
        f0: forces_from_x(x_prev),
        jac: jacobian_f(x_prev),
        target: &m.w_pinv * u,
    }
}

/// Variable layout `[dX (3N), s (3N), Z (3N - 6)]`.
fn dims(n: usize) -> (usize, usize, usize) {
    (3 * n, 3 * n, 3 * n - 6)
}

/// Quadratic part `2 blockdiag(Q1, Q2, Q3)`.
fn hessian(weights: &AllocatorWeights, n: usize) -> DMatrix<f64> {
    let (nx, ns, nz) = dims(n);
    let mut h = DMatrix::zeros(nx + ns + nz, nx + ns + nz);
    h.view_mut((0, 0), (nx, nx)).copy_from(&(&weights.q1 * 2.0));
    h.view_mut((nx, nx), (ns, ns)).copy_from(&(&weights.q2 * 2.0));
    h.view_mut((nx + ns, nx + ns), (nz, nz)).copy_from(&(&weights.q3 * 2.0));
    h
}

/// Linearized exactness constraint `J dX + s - N_W Z = W^+ u - F(X0)`.
fn equality(lin: &Linearization, m: &AllocationMatrixSet, n: usize) -> (DMatrix<f64>, DVector<f64>) {
    let (nx, ns, nz) = dims(n);
    let mut a = DMatrix::zeros(nx, nx + ns + nz);
    a.view_mut((0, 0), (nx, nx)).copy_from(&lin.jac);
    a.view_mut((0, nx), (ns, ns)).fill_with_identity();
    a.view_mut((0, nx + ns), (nx, nz)).copy_from(&(-&m.nullspace));
    (a, &lin.target - &lin.f0)
}

/// Box and rate limits on `dX`; slack and nullspace coordinates are free.
fn bounds(cfg: &PlatformConfig, lin: &Linearization, n: usize) -> (DVector<f64>, DVector<f64>) {
    let (nx, ns, nz) = dims(n);
    let total = nx + ns + nz;
    let x_min = cfg.x_min();
    let x_max = cfg.x_max();
    let dx = cfg.dx_max();
    let mut lb = DVector::from_element(total, f64::NEG_INFINITY);
    let mut ub = DVector::from_element(total, f64::INFINITY);
    for k in 0..nx {
        let lo = (x_min[k] - lin.x0[k]).max(-dx[k]);
        let hi = (x_max[k] - lin.x0[k]).min(dx[k]);
        // A previous state outside the box is pulled back as far as the rate allows.
        lb[k] = lo.min(hi);
        ub[k] = hi.max(lo);
    }
    (lb, ub)
}

/// Feasible starting point for the equality with `dX = 0`.
fn start_point(lin: &Linearization, m: &AllocationMatrixSet, n: usize) -> DVector<f64> {
    let (nx, ns, nz) = dims(n);
    let z0 = &m.nullspace_pinv * (&lin.f0 - &lin.target);
    let s0 = &lin.target + &m.nullspace * &z0 - &lin.f0;
    let mut v = DVector::zeros(nx + ns + nz);
    v.rows_mut(nx, ns).copy_from(&s0);
    v.rows_mut(nx + ns, nz).copy_from(&z0);
    v
}

/// Projects the QP step onto the exact solution set and recovers commands.
fn recover(
    sol: &QpSolution,
    lin: &Linearization,
    m: &AllocationMatrixSet,
    x_prev: &AllocationVector,
    cfg: &PlatformConfig,
) -> Result<(IkOutput, DVector<f64>, DVector<f64>, DVector<f64>), AllocError> {
    let n = cfg.n_generators;
    let (nx, ns, _) = dims(n);
    let x_lin = AllocationVector::from_vector(&lin.x0 + sol.x.rows(0, nx));
    let f_lin = forces_from_x(&x_lin);
    let z_star = &m.nullspace_pinv * (f_lin - &lin.target);
    let f_star = &lin.target + &m.nullspace * &z_star;
    let mut ik = inverse_kinematics(&f_star, x_prev)?;
    let lo = cfg.x_min();
    let hi = cfg.x_max();
    let clamped = ik.x.as_vector().zip_zip_map(&lo, &hi, |v, l, h| v.clamp(l, h));
    ik.x = AllocationVector::from_vector(clamped);
    let slack = sol.x.rows(nx, ns).into_owned();
    Ok((ik, f_star, z_star, slack))
}

fn finish(
    sol: QpSolution,
    lin: &Linearization,
    m: &AllocationMatrixSet,
    x_prev: &AllocationVector,
    cfg: &PlatformConfig,
    bounds_vec: DVector<f64>,
    relaxation: Relaxation,
) -> Result<AllocationResult, AllocError> {
    let (ik, forces, z, slack) = recover(&sol, lin, m, x_prev, cfg)?;
    let efficiency = thrust_efficiency(&ik.x)?;
    let constraints = constraint_vector(cfg, &ik.x);
    let step = sol.x.rows(0, 3 * cfg.n_generators).into_owned();
    Ok(AllocationResult {
        x: ik.x,
        forces,
        z,
        slack,
        step,
        efficiency,
        qp_status: sol.status,
        qp_iterations: sol.iterations,
        constraints,
        bounds: bounds_vec,
        relaxation,
        ik_singular: ik.singular,
    })
}

fn check_inputs(u_d: &Wrench, x_prev: &AllocationVector, cfg: &PlatformConfig) -> Result<(), AllocError> {
    if !u_d.is_finite() || !x_prev.is_finite() {
        return Err(AllocError::NonFinite);
    }
    assert_eq!(x_prev.n_generators(), cfg.n_generators, "allocation vector size");
    Ok(())
}

fn solve_qp(problem: &QpProblem, start: &DVector<f64>, options: &QpOptions) -> Result<QpSolution, QpError> {
    qp::solve_from(problem, options, Some(start))?.into_result()
}

/// Conventional nullspace allocation: the same QP without downwash rows and without the
/// thrust-sum term.
pub fn allocate_conventional(
    u_d: &Wrench,
    x_prev: &AllocationVector,
    weights: &AllocatorWeights,
    matrices: &AllocationMatrixSet,
    cfg: &PlatformConfig,
    options: &QpOptions,
) -> Result<AllocationResult, AllocError> {
    check_inputs(u_d, x_prev, cfg)?;
    let n = cfg.n_generators;
    let lin = linearize(u_d, x_prev, matrices);
    let h = hessian(weights, n);
    let f = DVector::zeros(h.nrows());
    let (a_eq, b_eq) = equality(&lin, matrices, n);
    let (lb, ub) = bounds(cfg, &lin, n);
    let problem = QpProblem::new(h, f).with_equalities(a_eq, b_eq).with_bounds(lb, ub);
    let start = start_point(&lin, matrices, n);
    let sol = solve_qp(&problem, &start, options).map_err(AllocError::QpInfeasible)?;
    let bounds_vec = DVector::zeros(n * (n - 1));
    finish(sol, &lin, matrices, x_prev, cfg, bounds_vec, Relaxation::None)
}

/// Downwash-aware allocation: conventional QP plus linearized clearance rows for every
/// gated pair and the thrust-sum penalty.
pub fn allocate(
    u_d: &Wrench,
    x_prev: &AllocationVector,
    weights: &AllocatorWeights,
    matrices: &AllocationMatrixSet,
    cfg: &PlatformConfig,
    options: &QpOptions,
) -> Result<AllocationResult, AllocError> {
    check_inputs(u_d, x_prev, cfg)?;
    let n = cfg.n_generators;
    let (nx, ns, nz) = dims(n);
    let lin = linearize(u_d, x_prev, matrices);
    let h = hessian(weights, n);
    let mut f = DVector::zeros(h.nrows());
    for k in 2 * n..3 * n {
        f[k] = weights.gamma;
    }
    let (a_eq, b_eq) = equality(&lin, matrices, n);
    let (lb, ub) = bounds(cfg, &lin, n);
    let base = QpProblem::new(h, f).with_equalities(a_eq, b_eq).with_bounds(lb.clone(), ub.clone());
    let start = start_point(&lin, matrices, n);

    let bounds_vec = constraint_bound(cfg, x_prev, weights.o_min);
    let gated: Vec<usize> = (0..bounds_vec.len()).filter(|&k| bounds_vec[k] > 0.0).collect();
    if gated.is_empty() {
        let sol = solve_qp(&base, &start, options).map_err(AllocError::QpInfeasible)?;
        return finish(sol, &lin, matrices, x_prev, cfg, bounds_vec, Relaxation::None);
    }

    let o0 = constraint_vector(cfg, x_prev);
    let d_o = constraint_jacobian(cfg, x_prev);
    let mut a_in = DMatrix::zeros(gated.len(), nx + ns + nz);
    let mut b_in = DVector::zeros(gated.len());
    for (row, &k) in gated.iter().enumerate() {
        a_in.view_mut((row, 0), (1, nx)).copy_from(&d_o.row(k));
        b_in[row] = bounds_vec[k] - o0[k];
    }

    let full = base.clone().with_inequalities(a_in.clone(), b_in.clone());
    if let Ok(sol) = solve_qp(&full, &start, options) {
        return finish(sol, &lin, matrices, x_prev, cfg, bounds_vec, Relaxation::None);
    }

    // Ask each row only for the increase it can reach within one tick.
    let reachable: Vec<f64> = (0..gated.len())
        .map(|row| {
            (0..nx)
                .map(|c| {
                    let g = a_in[(row, c)];
                    if g >= 0.0 {
                        g * ub[c]
                    } else {
                        g * lb[c]
                    }
                })
                .sum()
        })
        .collect();
    let scaled_b = DVector::from_fn(gated.len(), |row, _| b_in[row].min(0.5 * reachable[row]));
    let scaled = base.clone().with_inequalities(a_in, scaled_b);
    if let Ok(sol) = solve_qp(&scaled, &start, options) {
        log::debug!("downwash rows scaled to reachable targets");
        return finish(sol, &lin, matrices, x_prev, cfg, bounds_vec, Relaxation::Scaled);
    }

    log::info!("downwash rows dropped: allocation QP infeasible with clearance constraints");
    let sol = solve_qp(&base, &start, options).map_err(AllocError::QpInfeasible)?;
    finish(sol, &lin, matrices, x_prev, cfg, bounds_vec, Relaxation::Dropped)
}

/// Allocator bundling configuration, constant matrices, weights and mode.
#[derive(Debug, Clone)]
pub struct Allocator {
    pub config: PlatformConfig,
    pub matrices: AllocationMatrixSet,
    pub weights: AllocatorWeights,
    pub mode: AllocatorMode,
    pub options: QpOptions,
}

impl Allocator {
    pub fn new(config: PlatformConfig, weights: AllocatorWeights, mode: AllocatorMode) -> Result<Self, AllocError> {
        let matrices = build_w(&config)?;
        Ok(Self {
            config,
            matrices,
            weights,
            mode,
            options: QpOptions::default(),
        })
    }

    pub fn allocate(&self, u_d: &Wrench, x_prev: &AllocationVector) -> Result<AllocationResult, AllocError> {
        match self.mode {
            AllocatorMode::Conventional => {
                allocate_conventional(u_d, x_prev, &self.weights, &self.matrices, &self.config, &self.options)
            }
            AllocatorMode::DownwashAware => {
                allocate(u_d, x_prev, &self.weights, &self.matrices, &self.config, &self.options)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::actuation_wrench;
    use crate::frames::GRAVITY;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_6};

    fn w_of(x: &AllocationVector, m: &AllocationMatrixSet) -> Wrench {
        let v = &m.w * forces_from_x(x);
        Wrench::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]))
    }

    #[test]
    fn matrix_dimensions() {
        let m4 = build_w(&PlatformConfig::four()).unwrap();
        assert_eq!(m4.w.shape(), (6, 12));
        assert_eq!(m4.nullspace.shape(), (12, 6));
        let m6 = build_w(&PlatformConfig::six()).unwrap();
        assert_eq!(m6.w.shape(), (6, 18));
        assert_eq!(m6.nullspace.shape(), (18, 12));
    }

    #[test]
    fn nullspace_is_orthonormal_kernel() {
        for cfg in [PlatformConfig::four(), PlatformConfig::six()] {
            let m = build_w(&cfg).unwrap();
            assert!((&m.w * &m.nullspace).amax() < 1e-12);
            let k = m.nullspace.ncols();
            assert!((m.nullspace.transpose() * &m.nullspace - DMatrix::identity(k, k)).amax() < 1e-12);
            assert!((&m.w * &m.w_pinv - DMatrix::identity(6, 6)).amax() < 1e-12);
        }
    }

    #[test]
    fn collinear_mounts_are_degenerate() {
        let mut cfg = PlatformConfig::four();
        cfg.mount_positions = (0..4).map(|i| Vec3::new(0.1 * i as f64 - 0.15, 0.0, 0.0)).collect();
        assert!(matches!(build_w(&cfg), Err(AllocError::DegenerateGeometry { rank: 5 })));
    }

    #[test]
    fn w_times_f_is_actuation_wrench() {
        let cfg = PlatformConfig::six();
        let m = build_w(&cfg).unwrap();
        let x = AllocationVector::from_parts(
            &[0.3, -0.1, 1.2, 0.0, -2.0, 0.4],
            &[0.1, 0.5, -0.6, 1.0, 0.0, -1.3],
            &[0.2, 0.3, 0.1, 0.5, 0.4, 0.25],
        );
        let a = actuation_wrench(&cfg, &x);
        assert!((a.to_vector() - w_of(&x, &m).to_vector()).norm() < 1e-12);
    }

    #[test]
    fn force_examples() {
        let f = forces_from_x(&AllocationVector::from_parts(&[0.0, FRAC_PI_2], &[0.0, 0.0], &[1.0, 2.0]));
        assert!((f.rows(0, 3) - DVector::from_vec(vec![0.0, 0.0, 1.0])).norm() < 1e-15);
        assert!((f.rows(3, 3) - DVector::from_vec(vec![0.0, -2.0, 0.0])).norm() < 1e-15);
    }

    #[test]
    fn efficiency_examples() {
        let level = AllocationVector::level(4, 0.5);
        assert!((thrust_efficiency(&level).unwrap() - 1.0).abs() < 1e-15);
        let opposed = AllocationVector::from_parts(&[0.0, std::f64::consts::PI], &[0.0, 0.0], &[1.0, 1.0]);
        assert!(thrust_efficiency(&opposed).unwrap() < 1e-15);
        let tilted = AllocationVector::from_parts(&[0.0; 4], &[FRAC_PI_6, FRAC_PI_6, -FRAC_PI_6, -FRAC_PI_6], &[0.3; 4]);
        assert!((thrust_efficiency(&tilted).unwrap() - FRAC_PI_6.cos()).abs() < 1e-12);
        assert!(matches!(thrust_efficiency(&AllocationVector::level(3, 0.0)), Err(AllocError::ZeroThrust)));
    }

    #[test]
    fn ik_examples() {
        assert_eq!(ik_single(&Vec3::new(0.0, 0.0, 1.0), 0).unwrap(), (0.0, 0.0, 1.0));
        let (a, b, t) = ik_single(&Vec3::new(0.0, -1.0, 0.0), 0).unwrap();
        assert!((a - FRAC_PI_2).abs() < 1e-15 && b == 0.0 && t == 1.0);
        assert!(matches!(ik_single(&Vec3::new(0.0, 0.0, 1e-4), 3), Err(AllocError::IkSingular { index: 3, .. })));
    }

    #[test]
    fn ik_floor_keeps_previous_angles() {
        let prev = AllocationVector::from_parts(&[0.2, 0.1, 0.0], &[-0.3, 0.0, 0.0], &[0.5; 3]);
        let mut f = forces_from_x(&AllocationVector::level(3, 0.4));
        f.rows_mut(0, 3).fill(0.0);
        let out = inverse_kinematics(&f, &prev).unwrap();
        assert_eq!(out.singular, vec![0]);
        assert_eq!((out.x.alpha(0), out.x.beta(0), out.x.thrust(0)), (0.2, -0.3, T_FLOOR));
    }

    #[test]
    fn ik_unwraps_tilt_towards_previous() {
        let prev = AllocationVector::from_parts(&[3.1], &[0.0], &[1.0]);
        let f = forces_from_x(&AllocationVector::from_parts(&[-3.1], &[0.0], &[1.0]));
        let out = inverse_kinematics(&f, &prev).unwrap();
        assert!((out.x.alpha(0) - (2.0 * std::f64::consts::PI - 3.1)).abs() < 1e-12);
    }

    fn hover_case() -> (PlatformConfig, AllocationMatrixSet, Wrench) {
        let cfg = PlatformConfig::four();
        let m = build_w(&cfg).unwrap();
        let u = Wrench::new(Vec3::new(0.0, 0.0, cfg.total_mass() * GRAVITY), Vec3::zeros());
        (cfg, m, u)
    }

    #[test]
    fn hover_allocation_four_platform() {
        let (cfg, m, u) = hover_case();
        let weights = AllocatorWeights::defaults(4);
        let x0 = AllocationVector::level(4, 0.3);
        let mut x = x0;
        for _ in 0..200 {
            let r = allocate(&u, &x, &weights, &m, &cfg, &QpOptions::default()).unwrap();
            assert!(r.wrench_error(&m, &u) <= 1e-9);
            x = r.x;
        }
        for i in 0..4 {
            assert!((x.thrust(i) - 0.220 * GRAVITY / 4.0).abs() < 1e-6, "{}", x.thrust(i));
            assert!(x.alpha(i).abs() < 1e-6 && x.beta(i).abs() < 1e-6);
        }
        assert!(thrust_efficiency(&x).unwrap() > 1.0 - 1e-9);
    }

    #[test]
    fn respects_rate_and_box_limits() {
        let (cfg, m, _) = hover_case();
        let u = Wrench::new(Vec3::new(1.0, -0.5, 2.5), Vec3::new(0.05, -0.02, 0.03));
        let weights = AllocatorWeights::defaults(4);
        let mut x = cfg.hover_allocation();
        for _ in 0..50 {
            let r = allocate(&u, &x, &weights, &m, &cfg, &QpOptions::default()).unwrap();
            assert!(r.wrench_error(&m, &u) <= 1e-9);
            assert!(cfg.within_limits(&r.x, 1e-9));
            x = r.x;
        }
    }

    #[test]
    fn conventional_equivalence_with_zero_weights() {
        let (cfg, m, u) = hover_case();
        let weights = AllocatorWeights::defaults(4).conventional();
        let x = AllocationVector::from_parts(&[0.1, -0.2, 0.05, 0.0], &[0.0, 0.1, -0.1, 0.2], &[0.5, 0.6, 0.55, 0.5]);
        let a = allocate(&u, &x, &weights, &m, &cfg, &QpOptions::default()).unwrap();
        let b = allocate_conventional(&u, &x, &weights, &m, &cfg, &QpOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_input_rejected() {
        let (cfg, m, _) = hover_case();
        let u = Wrench::new(Vec3::new(f64::NAN, 0.0, 1.0), Vec3::zeros());
        let r = allocate(&u, &cfg.hover_allocation(), &AllocatorWeights::defaults(4), &m, &cfg, &QpOptions::default());
        assert!(matches!(r, Err(AllocError::NonFinite)));
    }

    #[test]
    fn weights_validation() {
        assert!(AllocatorWeights::defaults(6).validate(6).is_ok());
        let mut w = AllocatorWeights::defaults(4);
        w.q1[(0, 0)] = -1.0;
        assert!(w.validate(4).is_err());
        assert!(AllocatorWeights::defaults(4).validate(6).is_err());
    }
}
