//! Online facility-location selection.
//!
//! Variables are the assignments `z_new [B x B]`, `z_old [B x M]` and the
//! column indicators `u [B]`. The program is
//!
//! ```text
//! min  <d_new_new, z_new> + <d_new_old, z_old> + eps/2 (|z_new|^2 + |z_old|^2 + |u|^2)
//! s.t. sum_j z_old[i][j] + sum_j z_new[i][j] = 1      for every new point i
//!      z_new[i][j] <= u_j                              for every i, j
//!      sum_j u_j <= budget
//!      0 <= z, u <= 1
//! ```
//!
//! It is solved with a Mehrotra predictor-corrector interior-point method
//! whose Newton systems are reduced to a dense `B x B` positive definite
//! solve by eliminating the assignment variables.

use serde::{Deserialize, Serialize};

use crate::dataset::round_half_up;
use crate::embedder::DistanceBlocks;
use crate::error::{Error, Result};
use crate::difflayer::{ActiveSet, RowKind, GRAM_PIVOT_TOL};
use crate::tensor::{cholesky_solve, psd_solve, Matrix};

pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_MAX_ITERATIONS: usize = 200;
/// Column-mass slack absorbed when comparing against `xi`.
const MASS_SLACK: f64 = 1e-9;
/// Largest minibatch accepted by [`integral_oracle`].
pub const ORACLE_MAX_NEW: usize = 15;
const REFINEMENT_STEPS: usize = 2;
const POLISH_ROUNDS: usize = 8;
const POLISH_SIGN_TOL: f64 = 1e-12;
/// Residual below which an active-set polish is attempted.
const POLISH_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionProblem {
    pub blocks: DistanceBlocks,
    pub budget: usize,
    pub gamma: f64,
    pub epsilon: f64,
    pub xi: f64,
}

impl SelectionProblem {
    /// Budget is `max(1, round(gamma * B))`.
    pub fn new(blocks: DistanceBlocks, gamma: f64, epsilon: f64, xi: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidArgument(format!("gamma {gamma} outside (0, 1]")));
        }
        let b = blocks.num_new();
        let budget = round_half_up(gamma * b as f64).max(1);
        let mut p = Self::with_budget(blocks, budget, epsilon, xi)?;
        p.gamma = gamma;
        Ok(p)
    }

    pub fn with_budget(blocks: DistanceBlocks, budget: usize, epsilon: f64, xi: f64) -> Result<Self> {
        let b = blocks.num_new();
        if b == 0 {
            return Err(Error::InvalidArgument("selection needs at least one new point".into()));
        }
        if budget < 1 {
            return Err(Error::InfeasibleBudget(budget));
        }
        if budget > b {
            return Err(Error::InvalidArgument(format!(
                "budget {budget} exceeds minibatch size {b}"
            )));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon {epsilon} must be positive")));
        }
        if !(xi > 0.0 && xi <= 1.0) {
            return Err(Error::InvalidArgument(format!("xi {xi} outside (0, 1]")));
        }
        Ok(SelectionProblem {
            blocks,
            budget,
            gamma: budget as f64 / b as f64,
            epsilon,
            xi,
        })
    }

    pub fn num_new(&self) -> usize {
        self.blocks.num_new()
    }

    pub fn num_old(&self) -> usize {
        self.blocks.num_old()
    }

    pub(crate) fn layout(&self) -> Layout {
        Layout {
            b: self.num_new(),
            m: self.num_old(),
        }
    }

    // Linear cost over the stacked variable vector.
    pub(crate) fn cost(&self) -> Vec<f64> {
        let lay = self.layout();
        let mut c = vec![0.0; lay.n_var()];
        c[..lay.b * lay.b].copy_from_slice(self.blocks.d_new_new.as_slice());
        c[lay.b * lay.b..lay.b * lay.b + lay.b * lay.m]
            .copy_from_slice(self.blocks.d_new_old.as_slice());
        c
    }
}

/// Multipliers of the constraints, all nonnegative except `row_sum`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionDuals {
    /// One per new point (equality rows).
    pub row_sum: Vec<f64>,
    /// `z_new[i][j] <= u_j`
    pub linking: Matrix,
    pub budget: f64,
    /// Lower bounds `x >= 0` over the stacked variables `(z_new, z_old, u)`.
    pub lower: Vec<f64>,
    /// Upper bounds `x <= 1`, same order.
    pub upper: Vec<f64>,
}

impl SelectionDuals {
    /// Inequality multipliers stacked as `(linking, budget, lower, upper)`.
    pub fn inequality_vector(&self) -> Vec<f64> {
        let mut v = self.linking.as_slice().to_vec();
        v.push(self.budget);
        v.extend_from_slice(&self.lower);
        v.extend_from_slice(&self.upper);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSolution {
    pub z_new: Matrix,
    pub z_old: Matrix,
    pub u: Vec<f64>,
    pub duals: SelectionDuals,
    /// Full regularized objective.
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
}

impl SelectionSolution {
    /// Objective with the regularization term removed.
    pub fn linear_objective(&self, problem: &SelectionProblem) -> f64 {
        let dot = |a: &Matrix, b: &Matrix| -> f64 {
            a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
        };
        dot(&self.z_new, &problem.blocks.d_new_new) + dot(&self.z_old, &problem.blocks.d_new_old)
    }

    /// `sum_i z_new[i][j]` for each column `j`.
    pub fn column_mass(&self) -> Vec<f64> {
        let b = self.z_new.rows();
        (0..b)
            .map(|j| (0..b).map(|i| self.z_new[(i, j)]).sum())
            .collect()
    }

    pub(crate) fn stacked(&self) -> Vec<f64> {
        let mut x = self.z_new.as_slice().to_vec();
        x.extend_from_slice(self.z_old.as_slice());
        x.extend_from_slice(&self.u);
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedSet {
    /// Selected minibatch positions, ascending.
    pub indices: Vec<usize>,
    pub column_mass: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tolerance: DEFAULT_TOLERANCE,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }
}

/// Index bookkeeping for the stacked variables `(z_new, z_old, u)` and the
/// stacked inequalities `(linking, budget, lower, upper)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub b: usize,
    pub m: usize,
}

impl Layout {
    pub fn n_var(self) -> usize {
        self.b * self.b + self.b * self.m + self.b
    }
    pub fn n_ineq(self) -> usize {
        self.b * self.b + 1 + 2 * self.n_var()
    }
    #[inline]
    pub fn zn(self, i: usize, j: usize) -> usize {
        i * self.b + j
    }
    #[inline]
    pub fn zo(self, i: usize, j: usize) -> usize {
        self.b * self.b + i * self.m + j
    }
    #[inline]
    pub fn u(self, j: usize) -> usize {
        self.b * self.b + self.b * self.m + j
    }
    #[inline]
    pub fn budget_row(self) -> usize {
        self.b * self.b
    }
    #[inline]
    pub fn lower_row(self, k: usize) -> usize {
        self.b * self.b + 1 + k
    }
    #[inline]
    pub fn upper_row(self, k: usize) -> usize {
        self.b * self.b + 1 + self.n_var() + k
    }

    /// `G x`
    pub fn g_mul(self, x: &[f64]) -> Vec<f64> {
        let n = self.n_var();
        let mut out = vec![0.0; self.n_ineq()];
        for i in 0..self.b {
            for j in 0..self.b {
                out[self.zn(i, j)] = x[self.zn(i, j)] - x[self.u(j)];
            }
        }
        out[self.budget_row()] = (0..self.b).map(|j| x[self.u(j)]).sum();
        for k in 0..n {
            out[self.lower_row(k)] = -x[k];
            out[self.upper_row(k)] = x[k];
        }
        out
    }

    /// `G^T lam`
    pub fn gt_mul(self, lam: &[f64]) -> Vec<f64> {
        let n = self.n_var();
        let mut out = vec![0.0; n];
        for i in 0..self.b {
            for j in 0..self.b {
                let l = lam[self.zn(i, j)];
                out[self.zn(i, j)] += l;
                out[self.u(j)] -= l;
            }
        }
        let lb = lam[self.budget_row()];
        for j in 0..self.b {
            out[self.u(j)] += lb;
        }
        for (k, o) in out.iter_mut().enumerate() {
            *o += lam[self.upper_row(k)] - lam[self.lower_row(k)];
        }
        out
    }

    pub fn h(self, budget: usize) -> Vec<f64> {
        let mut h = vec![0.0; self.n_ineq()];
        h[self.budget_row()] = budget as f64;
        let n = self.n_var();
        for k in 0..n {
            h[self.upper_row(k)] = 1.0;
        }
        h
    }

    /// `A x` (row sums over new and old representatives).
    pub fn a_mul(self, x: &[f64]) -> Vec<f64> {
        (0..self.b)
            .map(|i| {
                (0..self.b).map(|j| x[self.zn(i, j)]).sum::<f64>()
                    + (0..self.m).map(|j| x[self.zo(i, j)]).sum::<f64>()
            })
            .collect()
    }

    pub fn at_mul(self, nu: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_var()];
        for i in 0..self.b {
            for j in 0..self.b {
                out[self.zn(i, j)] = nu[i];
            }
            for j in 0..self.m {
                out[self.zo(i, j)] = nu[i];
            }
        }
        out
    }
}

/// Residual components `(primal, dual, complementarity)` at `(x, nu, lam)`
/// using the true slacks `h - G x`.
pub(crate) fn residual_parts(
    problem: &SelectionProblem,
    x: &[f64],
    nu: &[f64],
    lam: &[f64],
) -> (f64, f64, f64) {
    if !x.iter().chain(nu).chain(lam).all(|v| v.is_finite()) {
        return (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    }
    let lay = problem.layout();
    let c = problem.cost();
    let eps = problem.epsilon;
    let gx = lay.g_mul(x);
    let h = lay.h(problem.budget);
    let ax = lay.a_mul(x);
    let primal_eq = ax.iter().fold(0.0_f64, |m, v| m.max((v - 1.0).abs()));
    let primal_in = gx
        .iter()
        .zip(&h)
        .fold(0.0_f64, |m, (g, hv)| m.max(g - hv));
    let at = lay.at_mul(nu);
    let gt = lay.gt_mul(lam);
    let dual = (0..x.len())
        .map(|k| (eps * x[k] + c[k] + at[k] + gt[k]).abs())
        .fold(0.0, f64::max);
    let dual_sign = lam.iter().fold(0.0_f64, |m, &l| m.max(-l));
    // Products are scaled down for multipliers above one so that a slack at
    // rounding level does not read as a violation when costs are large.
    let comp = lam
        .iter()
        .zip(gx.iter().zip(&h))
        .map(|(l, (g, hv))| (l * (hv - g)).abs() / l.abs().max(1.0))
        .fold(0.0, f64::max);
    (primal_eq.max(primal_in), dual.max(dual_sign), comp)
}

/// KKT residual of `solution` for `problem`: the largest of the primal
/// infeasibility, dual residual and complementarity violation.
pub fn kkt_residual(problem: &SelectionProblem, solution: &SelectionSolution) -> f64 {
    let lay = problem.layout();
    if solution.z_new.rows() != lay.b
        || solution.z_new.cols() != lay.b
        || solution.z_old.rows() != lay.b
        || solution.z_old.cols() != lay.m
        || solution.u.len() != lay.b
    {
        return f64::INFINITY;
    }
    let (p, d, c) = residual_parts(
        problem,
        &solution.stacked(),
        &solution.duals.row_sum,
        &solution.duals.inequality_vector(),
    );
    p.max(d).max(c)
}

// Reduced Newton system for fixed barrier weights `w = lam / s`.
struct NewtonSystem {
    lay: Layout,
    w_link: Vec<f64>,
    a_zn: Vec<f64>,
    d_zo: Vec<f64>,
    p: Vec<f64>,
    q: Vec<f64>,
    chol: Matrix,
    wb: f64,
    s0_inv_ones: Vec<f64>,
    ones_s0_ones: f64,
    eps: f64,
    w: Vec<f64>,
}

impl NewtonSystem {
    fn factor(lay: Layout, eps: f64, w: &[f64]) -> Result<Self> {
        let (b, m) = (lay.b, lay.m);
        let diag = |k: usize| eps + w[lay.lower_row(k)] + w[lay.upper_row(k)];
        let w_link: Vec<f64> = (0..b * b).map(|k| w[k]).collect();
        let wb = w[lay.budget_row()];
        let mut a_zn = vec![0.0; b * b];
        let mut p = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                let k = lay.zn(i, j);
                a_zn[k] = diag(k) + w_link[k];
                p[k] = w_link[k] / a_zn[k];
            }
        }
        let d_zo: Vec<f64> = (0..b * m).map(|k| diag(b * b + k)).collect();
        let q: Vec<f64> = (0..b)
            .map(|i| {
                (0..b).map(|j| 1.0 / a_zn[lay.zn(i, j)]).sum::<f64>()
                    + (0..m).map(|j| 1.0 / d_zo[i * m + j]).sum::<f64>()
            })
            .collect();
        // S0 = diag(u terms) + P^T Q^{-1} P; the budget term wb 11^T is
        // applied through Sherman-Morrison in `solve`.
        let mut s = Matrix::zeros(b, b);
        for j in 0..b {
            let mut dj = diag(lay.u(j));
            for i in 0..b {
                let k = lay.zn(i, j);
                dj += w_link[k] * diag(k) / a_zn[k];
            }
            s[(j, j)] += dj;
        }
        for i in 0..b {
            for j in 0..b {
                let pij = p[lay.zn(i, j)] / q[i];
                if pij == 0.0 {
                    continue;
                }
                for l in 0..b {
                    s[(j, l)] += pij * p[lay.zn(i, l)];
                }
            }
        }
        let chol = guarded_cholesky(&s)?;
        let s0_inv_ones = cholesky_solve(&chol, &vec![1.0; b]);
        let ones_s0_ones: f64 = s0_inv_ones.iter().sum();
        Ok(NewtonSystem {
            lay,
            w_link,
            a_zn,
            d_zo,
            p,
            q,
            chol,
            wb,
            s0_inv_ones,
            ones_s0_ones,
            eps,
            w: w.to_vec(),
        })
    }

    /// Solves `H dx + A^T dnu = r1`, `A dx = r2`.
    // Unreduced operator: `((eps I + G^T W G) dx + A^T dnu, A dx)`.
    fn apply(&self, dx: &[f64], dnu: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let lay = self.lay;
        let mut t = lay.g_mul(dx);
        for (tv, wv) in t.iter_mut().zip(&self.w) {
            *tv *= wv;
        }
        let gt = lay.gt_mul(&t);
        let at = lay.at_mul(dnu);
        let top = (0..dx.len()).map(|k| self.eps * dx[k] + gt[k] + at[k]).collect();
        (top, lay.a_mul(dx))
    }

    // Reduced solve followed by iterative refinement, which recovers the
    // accuracy lost to very large barrier weights near convergence.
    fn solve(&self, r1: &[f64], r2: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (mut dx, mut dnu) = self.solve_reduced(r1, r2);
        for _ in 0..REFINEMENT_STEPS {
            let (a1, a2) = self.apply(&dx, &dnu);
            let e1: Vec<f64> = r1.iter().zip(&a1).map(|(r, a)| r - a).collect();
            let e2: Vec<f64> = r2.iter().zip(&a2).map(|(r, a)| r - a).collect();
            let (cx, cnu) = self.solve_reduced(&e1, &e2);
            if !cx.iter().chain(&cnu).all(|v| v.is_finite()) {
                break;
            }
            for (d, c) in dx.iter_mut().zip(&cx) {
                *d += c;
            }
            for (d, c) in dnu.iter_mut().zip(&cnu) {
                *d += c;
            }
        }
        (dx, dnu)
    }

    fn solve_reduced(&self, r1: &[f64], r2: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let lay = self.lay;
        let (b, m) = (lay.b, lay.m);
        let mut r_nu = vec![0.0; b];
        for i in 0..b {
            let mut v = r2[i];
            for j in 0..b {
                let k = lay.zn(i, j);
                v -= r1[k] / self.a_zn[k];
            }
            for j in 0..m {
                v -= r1[lay.zo(i, j)] / self.d_zo[i * m + j];
            }
            r_nu[i] = v;
        }
        let mut rhs = vec![0.0; b];
        for (j, r) in rhs.iter_mut().enumerate() {
            let mut v = r1[lay.u(j)];
            for i in 0..b {
                let k = lay.zn(i, j);
                v += self.p[k] * (r1[k] + r_nu[i] / self.q[i]);
            }
            *r = v;
        }
        let mut du = cholesky_solve(&self.chol, &rhs);
        let coef = self.wb * du.iter().sum::<f64>() / (1.0 + self.wb * self.ones_s0_ones);
        for (d, o) in du.iter_mut().zip(&self.s0_inv_ones) {
            *d -= coef * o;
        }
        let dnu: Vec<f64> = (0..b)
            .map(|i| {
                let s: f64 = (0..b).map(|j| self.p[lay.zn(i, j)] * du[j]).sum();
                (s - r_nu[i]) / self.q[i]
            })
            .collect();
        let mut dx = vec![0.0; lay.n_var()];
        for i in 0..b {
            for j in 0..b {
                let k = lay.zn(i, j);
                dx[k] = (r1[k] + self.w_link[k] * du[j] - dnu[i]) / self.a_zn[k];
            }
            for j in 0..m {
                let k = lay.zo(i, j);
                dx[k] = (r1[k] - dnu[i]) / self.d_zo[i * m + j];
            }
        }
        for j in 0..b {
            dx[lay.u(j)] = du[j];
        }
        (dx, dnu)
    }
}

// Cholesky for the interior-point normal equations. Pivots lost to
// cancellation are replaced by a huge value, which zeroes the corresponding
// search-direction component instead of failing.
fn guarded_cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !d.is_finite() {
            return Err(Error::NonFinite(format!("interior-point pivot {j}")));
        }
        if d <= 1e-14 * a[(j, j)].abs().max(f64::MIN_POSITIVE) {
            l[(j, j)] = 1e64;
            continue;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

// Largest alpha in (0, 1] keeping v + alpha * dv >= 0.
fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, &d)| d < 0.0)
        .fold(1.0_f64, |a, (&x, &d)| a.min(-x / d))
}

pub fn solve_selection(problem: &SelectionProblem) -> Result<SelectionSolution> {
    solve_selection_with(problem, &SolverOptions::default())
}

pub fn solve_selection_with(
    problem: &SelectionProblem,
    options: &SolverOptions,
) -> Result<SelectionSolution> {
    if problem.budget < 1 {
        return Err(Error::InfeasibleBudget(problem.budget));
    }
    let lay = problem.layout();
    let (b, m) = (lay.b, lay.m);
    let n_var = lay.n_var();
    let n_in = lay.n_ineq();
    let eps = problem.epsilon;
    let c = problem.cost();
    if c.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument("distances must be finite and nonnegative".into()));
    }
    let h = lay.h(problem.budget);

    let share = 1.0 / (b + m) as f64;
    let mut x = vec![share; n_var];
    let u0 = 0.5 * (problem.budget as f64 / b as f64).min(1.0);
    for j in 0..b {
        x[lay.u(j)] = u0;
    }
    let mut s: Vec<f64> = lay
        .g_mul(&x)
        .iter()
        .zip(&h)
        .map(|(g, hv)| (hv - g).max(1.0))
        .collect();
    let mut lam = vec![1.0; n_in];
    let mut nu = vec![0.0; b];

    // Polishing is attempted once the residual is small relative to the cost
    // scale, and on the best iterate if the iteration breaks down.
    let polish_below = POLISH_THRESHOLD * c.iter().fold(1.0_f64, |a, v| a.max(*v));
    let try_polish = |x: &[f64], nu: &[f64], lam: &[f64], res: f64, iter: usize| {
        polish(problem, x, nu, lam)
            .filter(|&(_, _, _, pres)| pres <= options.tolerance && pres < res)
            .map(|(px, pnu, plam, pres)| package(problem, px, pnu, plam, pres, iter))
    };
    let mut best: Option<(Vec<f64>, Vec<f64>, Vec<f64>, f64, usize)> = None;
    let mut last_residual = f64::INFINITY;
    for iter in 0..options.max_iterations {
        let (p, d, cp) = residual_parts(problem, &x, &nu, &lam);
        last_residual = p.max(d).max(cp);
        if !last_residual.is_finite() {
            break;
        }
        if last_residual <= polish_below.max(options.tolerance) {
            if let Some(sol) = try_polish(&x, &nu, &lam, last_residual, iter) {
                return Ok(sol);
            }
            if last_residual <= options.tolerance {
                return Ok(package(problem, x, nu, lam, last_residual, iter));
            }
        }
        if best.as_ref().map_or(true, |b| last_residual < b.3) {
            best = Some((x.clone(), nu.clone(), lam.clone(), last_residual, iter));
        }

        let gx = lay.g_mul(&x);
        let at = lay.at_mul(&nu);
        let gt = lay.gt_mul(&lam);
        let rd: Vec<f64> = (0..n_var).map(|k| eps * x[k] + c[k] + at[k] + gt[k]).collect();
        let rp: Vec<f64> = lay.a_mul(&x).iter().map(|v| v - 1.0).collect();
        let ri: Vec<f64> = (0..n_in).map(|k| gx[k] + s[k] - h[k]).collect();
        let mu = s.iter().zip(&lam).map(|(a, l)| a * l).sum::<f64>() / n_in as f64;
        let w: Vec<f64> = lam.iter().zip(&s).map(|(l, sv)| l / sv).collect();
        let Ok(sys) = NewtonSystem::factor(lay, eps, &w) else {
            break;
        };
        let r2: Vec<f64> = rp.iter().map(|v| -v).collect();

        let direction = |rc: &[f64]| {
            // rhs_x = -rd - G^T S^{-1} (Lam ri - rc)
            let t: Vec<f64> = (0..n_in).map(|k| (lam[k] * ri[k] - rc[k]) / s[k]).collect();
            let gt_t = lay.gt_mul(&t);
            let r1: Vec<f64> = (0..n_var).map(|k| -rd[k] - gt_t[k]).collect();
            let (dx, dnu) = sys.solve(&r1, &r2);
            let gdx = lay.g_mul(&dx);
            let ds: Vec<f64> = (0..n_in).map(|k| -ri[k] - gdx[k]).collect();
            let dl: Vec<f64> = (0..n_in).map(|k| (-rc[k] - lam[k] * ds[k]) / s[k]).collect();
            (dx, dnu, ds, dl)
        };

        let rc_aff: Vec<f64> = s.iter().zip(&lam).map(|(a, l)| a * l).collect();
        let (_, _, ds_a, dl_a) = direction(&rc_aff);
        let alpha_aff = max_step(&s, &ds_a).min(max_step(&lam, &dl_a));
        let mu_aff = (0..n_in)
            .map(|k| (s[k] + alpha_aff * ds_a[k]) * (lam[k] + alpha_aff * dl_a[k]))
            .sum::<f64>()
            / n_in as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);
        let rc: Vec<f64> = (0..n_in)
            .map(|k| s[k] * lam[k] + ds_a[k] * dl_a[k] - sigma * mu)
            .collect();
        let (dx, dnu, ds, dl) = direction(&rc);
        let alpha = (0.99 * max_step(&s, &ds).min(max_step(&lam, &dl))).min(1.0);

        for k in 0..n_var {
            x[k] += alpha * dx[k];
        }
        for i in 0..b {
            nu[i] += alpha * dnu[i];
        }
        for k in 0..n_in {
            s[k] += alpha * ds[k];
            lam[k] += alpha * dl[k];
        }
    }
    if let Some((bx, bnu, blam, bres, biter)) = best {
        if let Some(sol) = try_polish(&bx, &bnu, &blam, bres, biter) {
            return Ok(sol);
        }
        if !last_residual.is_finite() {
            last_residual = bres;
        }
    }
    Err(Error::NonConvergence {
        iterations: options.max_iterations,
        residual: last_residual,
    })
}

// Re-solves the program with the active constraints of a converged iterate
// as equalities, which removes the interior-point centring error. Weakly
// active constraints can be misclassified, so a few primal-dual active-set
// corrections follow. The candidate must still be compared against the
// iterate by the caller.
fn polish(
    problem: &SelectionProblem,
    x: &[f64],
    nu_ipm: &[f64],
    lam_ipm: &[f64],
) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
    let lay = problem.layout();
    let mut mask = ActiveSet::from_iterate(problem, x, lam_ipm).mask().to_vec();
    let h = lay.h(problem.budget);
    for _ in 0..POLISH_ROUNDS {
        let (xp, nu, lp) = solve_on_active_set(problem, &mask, nu_ipm, lam_ipm)?;
        let gx = lay.g_mul(&xp);
        let mut changed = false;
        for k in 0..lay.n_ineq() {
            if mask[k] && lp[k] < -POLISH_SIGN_TOL {
                mask[k] = false;
                changed = true;
            } else if !mask[k] && gx[k] - h[k] > POLISH_SIGN_TOL {
                mask[k] = true;
                changed = true;
            }
        }
        if !changed {
            let (p, d, cp) = residual_parts(problem, &xp, &nu, &lp);
            let res = p.max(d).max(cp);
            return res.is_finite().then_some((xp, nu, lp, res));
        }
    }
    None
}

// Stationary point of the program with the masked inequalities as
// equalities, with multipliers for every constraint.
fn solve_on_active_set(
    problem: &SelectionProblem,
    mask: &[bool],
    nu_ipm: &[f64],
    lam_ipm: &[f64],
) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let lay = problem.layout();
    let n = lay.n_var();
    let eps = problem.epsilon;
    let c = problem.cost();
    let act = ActiveSet::from_mask(problem, mask.to_vec());
    let fixed = act.fixed();
    let upper = act.at_upper();

    let mut xp = vec![0.0; n];
    for k in 0..n {
        if fixed[k] && upper[k] {
            xp[k] = 1.0;
        }
    }
    // Target of each active row on the free variables.
    let target = |kind: RowKind| -> f64 {
        match kind {
            RowKind::RowSum(i) => {
                let fixed_part: f64 = (0..lay.b)
                    .map(|j| lay.zn(i, j))
                    .chain((0..lay.m).map(|j| lay.zo(i, j)))
                    .filter(|&k| fixed[k])
                    .map(|k| xp[k])
                    .sum();
                1.0 - fixed_part
            }
            RowKind::Link(i, j) => {
                let (zk, uk) = (lay.zn(i, j), lay.u(j));
                let zf = if fixed[zk] { xp[zk] } else { 0.0 };
                let uf = if fixed[uk] { xp[uk] } else { 0.0 };
                uf - zf
            }
            RowKind::Budget => {
                let fixed_part: f64 = (0..lay.b).map(|j| lay.u(j)).filter(|&k| fixed[k]).map(|k| xp[k]).sum();
                problem.budget as f64 - fixed_part
            }
        }
    };
    let rows = act.rows();
    let rhs: Vec<f64> = rows
        .iter()
        .map(|(kind, e)| -eps * target(*kind) - e.iter().map(|&(k, v)| v * c[k]).sum::<f64>())
        .collect();
    // Redundant active rows leave the multipliers non-unique; correct the
    // interior-point ones so the bound multipliers stay close to theirs.
    let mut y: Vec<f64> = rows
        .iter()
        .map(|(kind, _)| match *kind {
            RowKind::RowSum(i) => nu_ipm[i],
            RowKind::Link(i, j) => lam_ipm[lay.zn(i, j)],
            RowKind::Budget => lam_ipm[lay.budget_row()],
        })
        .collect();
    if !rows.is_empty() {
        let gy = act.gram().matvec(&y).ok()?;
        let r: Vec<f64> = rhs.iter().zip(&gy).map(|(a, b)| a - b).collect();
        let (delta, _) = psd_solve(act.gram(), &r, GRAM_PIVOT_TOL).ok()?;
        for (yv, dv) in y.iter_mut().zip(&delta) {
            *yv += dv;
        }
        let gy = act.gram().matvec(&y).ok()?;
        let scale = rhs.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        if gy.iter().zip(&rhs).any(|(a, b)| (a - b).abs() > 1e-9 * scale) {
            return None;
        }
    }

    let mut aty = vec![0.0; n];
    for ((_, e), yr) in rows.iter().zip(&y) {
        for &(k, v) in e {
            aty[k] += v * yr;
        }
    }
    for k in 0..n {
        if !fixed[k] {
            xp[k] = -(c[k] + aty[k]) / eps;
        }
    }

    // Rows touching no free variable keep the interior-point multipliers.
    let mut nu = nu_ipm.to_vec();
    let mut lp = vec![0.0; lay.n_ineq()];
    for k in 0..=lay.budget_row() {
        if mask[k] {
            lp[k] = lam_ipm[k];
        }
    }
    for ((kind, _), &yr) in rows.iter().zip(&y) {
        match *kind {
            RowKind::RowSum(i) => nu[i] = yr,
            RowKind::Link(i, j) => lp[lay.zn(i, j)] = yr,
            RowKind::Budget => lp[lay.budget_row()] = yr,
        }
    }
    // Bound multipliers close the stationarity condition on fixed variables.
    let at = lay.at_mul(&nu);
    let gt = lay.gt_mul(&lp);
    for k in 0..n {
        if fixed[k] {
            let g = eps * xp[k] + c[k] + at[k] + gt[k];
            if upper[k] {
                lp[lay.upper_row(k)] = -g;
            } else {
                lp[lay.lower_row(k)] = g;
            }
        }
    }
    Some((xp, nu, lp))
}

fn package(
    problem: &SelectionProblem,
    x: Vec<f64>,
    nu: Vec<f64>,
    lam: Vec<f64>,
    residual: f64,
    iterations: usize,
) -> SelectionSolution {
    let lay = problem.layout();
    let (b, m) = (lay.b, lay.m);
    let n = lay.n_var();
    let c = problem.cost();
    let objective = x
        .iter()
        .zip(&c)
        .map(|(xv, cv)| cv * xv + 0.5 * problem.epsilon * xv * xv)
        .sum();
    let z_new = Matrix::from_vec(b, b, x[..b * b].to_vec()).expect("sized");
    let z_old = Matrix::from_vec(b, m, x[b * b..b * b + b * m].to_vec()).expect("sized");
    let u = x[b * b + b * m..].to_vec();
    let duals = SelectionDuals {
        row_sum: nu,
        linking: Matrix::from_vec(b, b, lam[..b * b].to_vec()).expect("sized"),
        budget: lam[lay.budget_row()],
        lower: lam[lay.lower_row(0)..lay.lower_row(0) + n].to_vec(),
        upper: lam[lay.upper_row(0)..lay.upper_row(0) + n].to_vec(),
    };
    SelectionSolution {
        z_new,
        z_old,
        u,
        duals,
        objective,
        kkt_residual: residual,
        iterations,
    }
}

/// Columns whose mass reaches `xi`, capped at the budget by largest mass
/// (ties to the smaller index), returned ascending.
pub fn hard_select(solution: &SelectionSolution, problem: &SelectionProblem) -> SelectedSet {
    let mass = solution.column_mass();
    let mut candidates: Vec<usize> = (0..mass.len())
        .filter(|&j| mass[j] + MASS_SLACK >= problem.xi)
        .collect();
    candidates.sort_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b)));
    candidates.truncate(problem.budget);
    candidates.sort_unstable();
    SelectedSet {
        indices: candidates,
        column_mass: mass,
    }
}

/// Facility-location cost of choosing `subset` of the new points, with every
/// old point available as a free representative. Infinite when some point has
/// no representative at all.
pub fn subset_cost(blocks: &DistanceBlocks, subset: &[usize]) -> f64 {
    let b = blocks.num_new();
    (0..b)
        .map(|i| {
            let best_new = subset
                .iter()
                .map(|&j| blocks.d_new_new[(i, j)])
                .fold(f64::INFINITY, f64::min);
            let best_old = blocks
                .d_new_old
                .row(i)
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            best_new.min(best_old)
        })
        .sum()
}

/// Exhaustive minimizer of the combinatorial facility-location objective over
/// nonempty subsets of at most `budget` new points. Ties go to the
/// lexicographically smallest subset.
pub fn integral_oracle(blocks: &DistanceBlocks, budget: usize) -> Result<(Vec<usize>, f64)> {
    let b = blocks.num_new();
    if b > ORACLE_MAX_NEW {
        return Err(Error::InvalidArgument(format!(
            "exhaustive oracle limited to {ORACLE_MAX_NEW} new points, got {b}"
        )));
    }
    if budget < 1 {
        return Err(Error::InfeasibleBudget(budget));
    }
    if b == 0 {
        return Err(Error::InvalidArgument("oracle needs at least one new point".into()));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for mask in 1u32..(1u32 << b) {
        if mask.count_ones() as usize > budget {
            continue;
        }
        let subset: Vec<usize> = (0..b).filter(|&j| mask & (1 << j) != 0).collect();
        let cost = subset_cost(blocks, &subset);
        let better = match &best {
            None => true,
            Some((s, c)) => cost < *c || (cost == *c && subset < *s),
        };
        if better {
            best = Some((subset, cost));
        }
    }
    Ok(best.expect("at least one subset"))
}
