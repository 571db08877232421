//! Backward pass of the selection layer.
//!
//! At a solution of the regularized program, the KKT conditions restricted to
//! the strictly active constraints read
//!
//! ```text
//! eps dx + A_S^T dy = -dc,    A_S dx = 0
//! ```
//!
//! so `dx/dc = -(1/eps) P`, where `P` is the orthogonal projector onto the
//! null space of the active constraint rows. `P` is symmetric, which makes the
//! adjoint the same projection: `dJ/dc = -(1/eps) P dJ/dx`. The projection is
//! computed with one solve of the Gram system `A_S A_S^T y = A_S g`, factored
//! with pivoting so redundant active constraints are dropped rather than
//! making the system singular.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::select::{kkt_residual, Layout, SelectionProblem, SelectionSolution, DEFAULT_TOLERANCE};
use crate::tensor::{psd_solve, Matrix};

/// Multipliers at or below this value never mark a constraint active.
pub const ACTIVE_THRESHOLD: f64 = 1e-7;
/// Relative pivot floor for the Gram factorization.
pub(crate) const GRAM_PIVOT_TOL: f64 = 1e-11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionGradient {
    /// `dJ/dd_new_new`, `[B x B]`
    pub d_new_new: Matrix,
    /// `dJ/dd_new_old`, `[B x M]`
    pub d_new_old: Matrix,
}

/// Constraint family, used for naming constraints in errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum RowKind {
    RowSum(usize),
    Link(usize, usize),
    Budget,
}

impl std::fmt::Display for RowKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RowKind::RowSum(i) => write!(f, "row_sum[{i}]"),
            RowKind::Link(i, j) => write!(f, "link[{i},{j}]"),
            RowKind::Budget => write!(f, "budget"),
        }
    }
}

/// Null-space projector of the active constraints at a solution.
pub struct ActiveSet {
    n_var: usize,
    /// Variables pinned by an active bound.
    fixed: Vec<bool>,
    at_upper: Vec<bool>,
    /// Active non-bound rows restricted to free variables.
    rows: Vec<(RowKind, Vec<(usize, f64)>)>,
    gram: Matrix,
    mask: Vec<bool>,
}

impl ActiveSet {
    pub fn at(problem: &SelectionProblem, solution: &SelectionSolution) -> Result<Self> {
        let residual = kkt_residual(problem, solution);
        if !(residual <= DEFAULT_TOLERANCE) {
            return Err(Error::StaleSolution {
                residual,
                tolerance: DEFAULT_TOLERANCE,
            });
        }
        Ok(Self::from_iterate(
            problem,
            &solution.stacked(),
            &solution.duals.inequality_vector(),
        ))
    }

    /// Active set read off a primal-dual point without checking optimality.
    pub(crate) fn from_iterate(problem: &SelectionProblem, x: &[f64], lam: &[f64]) -> Self {
        let lay: Layout = problem.layout();
        let gx = lay.g_mul(x);
        let h = lay.h(problem.budget);
        let mask: Vec<bool> = (0..lay.n_ineq())
            .map(|k| lam[k] > ACTIVE_THRESHOLD && lam[k] > h[k] - gx[k])
            .collect();
        Self::from_mask(problem, mask)
    }

    /// Active set given explicitly as a flag per inequality.
    pub(crate) fn from_mask(problem: &SelectionProblem, mask: Vec<bool>) -> Self {
        let lay: Layout = problem.layout();
        let n = lay.n_var();
        let active = |k: usize| mask[k];
        let fixed: Vec<bool> = (0..n)
            .map(|k| active(lay.lower_row(k)) || active(lay.upper_row(k)))
            .collect();
        let keep = |entries: Vec<(usize, f64)>| -> Vec<(usize, f64)> {
            entries.into_iter().filter(|&(k, _)| !fixed[k]).collect()
        };

        let mut rows = Vec::new();
        for i in 0..lay.b {
            let mut e: Vec<(usize, f64)> = (0..lay.b).map(|j| (lay.zn(i, j), 1.0)).collect();
            e.extend((0..lay.m).map(|j| (lay.zo(i, j), 1.0)));
            rows.push((RowKind::RowSum(i), keep(e)));
        }
        for i in 0..lay.b {
            for j in 0..lay.b {
                if active(lay.zn(i, j)) {
                    rows.push((
                        RowKind::Link(i, j),
                        keep(vec![(lay.zn(i, j), 1.0), (lay.u(j), -1.0)]),
                    ));
                }
            }
        }
        if active(lay.budget_row()) {
            rows.push((
                RowKind::Budget,
                keep((0..lay.b).map(|j| (lay.u(j), 1.0)).collect()),
            ));
        }
        rows.retain(|(_, e)| !e.is_empty());

        let r = rows.len();
        let mut gram = Matrix::zeros(r, r);
        let mut dense = vec![0.0; n];
        for a in 0..r {
            for &(k, v) in &rows[a].1 {
                dense[k] = v;
            }
            for b in a..r {
                let g: f64 = rows[b].1.iter().map(|&(k, v)| dense[k] * v).sum();
                gram[(a, b)] = g;
                gram[(b, a)] = g;
            }
            for &(k, _) in &rows[a].1 {
                dense[k] = 0.0;
            }
        }
        let at_upper: Vec<bool> = (0..n).map(|k| active(lay.upper_row(k))).collect();
        ActiveSet {
            n_var: n,
            fixed,
            at_upper,
            rows,
            gram,
            mask,
        }
    }

    pub(crate) fn fixed(&self) -> &[bool] {
        &self.fixed
    }

    /// Fixed variables sitting at their upper bound.
    pub(crate) fn at_upper(&self) -> &[bool] {
        &self.at_upper
    }

    pub(crate) fn rows(&self) -> &[(RowKind, Vec<(usize, f64)>)] {
        &self.rows
    }

    pub(crate) fn gram(&self) -> &Matrix {
        &self.gram
    }

    /// Active flag of every inequality, ordered `(linking, budget, lower, upper)`.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn num_active_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_fixed(&self) -> usize {
        self.fixed.iter().filter(|&&f| f).count()
    }

    /// Orthogonal projection of `g` onto the null space of the active constraints.
    pub fn project(&self, g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != self.n_var {
            return Err(Error::dim("projection input", self.n_var, g.len()));
        }
        let mut w: Vec<f64> = g
            .iter()
            .zip(&self.fixed)
            .map(|(&v, &f)| if f { 0.0 } else { v })
            .collect();
        if self.rows.is_empty() {
            return Ok(w);
        }
        let rhs: Vec<f64> = self
            .rows
            .iter()
            .map(|(_, e)| e.iter().map(|&(k, v)| v * w[k]).sum())
            .collect();
        let (y, dropped) = psd_solve(&self.gram, &rhs, GRAM_PIVOT_TOL)?;

        // The right-hand side lies in the range of the Gram matrix; a large
        // residual means the dropped rows were not actually redundant.
        let back = self.gram.matvec(&y)?;
        let scale = rhs.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        let err = back
            .iter()
            .zip(&rhs)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        if !(err <= 1e-8 * scale) {
            let names: Vec<String> = dropped.iter().map(|&d| self.rows[d].0.to_string()).collect();
            return Err(Error::SingularKkt {
                constraints: names.join(", "),
            });
        }
        for ((_, e), yr) in self.rows.iter().zip(&y) {
            for &(k, v) in e {
                w[k] -= v * yr;
            }
        }
        Ok(w)
    }
}

/// `dJ/dd` for both distance blocks, given `dJ/du` and optionally `dJ/dz_new`.
pub fn differentiate_selection(
    problem: &SelectionProblem,
    solution: &SelectionSolution,
    dj_du: &[f64],
    dj_dz_new: Option<&Matrix>,
) -> Result<SelectionGradient> {
    let lay = problem.layout();
    let (b, m) = (lay.b, lay.m);
    if dj_du.len() != b {
        return Err(Error::dim("dJ/du", b, dj_du.len()));
    }
    let mut g = vec![0.0; lay.n_var()];
    if let Some(dz) = dj_dz_new {
        if dz.rows() != b || dz.cols() != b {
            return Err(Error::dim("dJ/dz_new", b * b, dz.rows() * dz.cols()));
        }
        g[..b * b].copy_from_slice(dz.as_slice());
    }
    for j in 0..b {
        g[lay.u(j)] = dj_du[j];
    }
    let zero = || SelectionGradient {
        d_new_new: Matrix::zeros(b, b),
        d_new_old: Matrix::zeros(b, m),
    };
    let active = ActiveSet::at(problem, solution)?;
    if g.iter().all(|&v| v == 0.0) {
        return Ok(zero());
    }
    let w = active.project(&g)?;
    let scale = -1.0 / problem.epsilon;
    let d_new_new =
        Matrix::from_vec(b, b, w[..b * b].iter().map(|v| scale * v).collect()).expect("sized");
    let d_new_old = Matrix::from_vec(
        b,
        m,
        w[b * b..b * b + b * m].iter().map(|v| scale * v).collect(),
    )
    .expect("sized");
    if !d_new_new.is_finite() || !d_new_old.is_finite() {
        return Err(Error::NonFinite("selection gradient".into()));
    }
    Ok(SelectionGradient {
        d_new_new,
        d_new_old,
    })
}

/// Forward-mode sensitivity: the change in `(u, z_new, z_old)` produced by a
/// distance perturbation `(dd_new_new, dd_new_old)`.
pub fn selection_jvp(
    problem: &SelectionProblem,
    solution: &SelectionSolution,
    dd_new_new: &Matrix,
    dd_new_old: &Matrix,
) -> Result<(Vec<f64>, Matrix, Matrix)> {
    let lay = problem.layout();
    let (b, m) = (lay.b, lay.m);
    if dd_new_new.rows() != b || dd_new_new.cols() != b {
        return Err(Error::dim("dd_new_new", b * b, dd_new_new.rows() * dd_new_new.cols()));
    }
    if dd_new_old.rows() != b || dd_new_old.cols() != m {
        return Err(Error::dim("dd_new_old", b * m, dd_new_old.rows() * dd_new_old.cols()));
    }
    let mut dc = vec![0.0; lay.n_var()];
    dc[..b * b].copy_from_slice(dd_new_new.as_slice());
    dc[b * b..b * b + b * m].copy_from_slice(dd_new_old.as_slice());
    let active = ActiveSet::at(problem, solution)?;
    let w = active.project(&dc)?;
    let scale = -1.0 / problem.epsilon;
    let dx: Vec<f64> = w.iter().map(|v| scale * v).collect();
    Ok((
        dx[b * b + b * m..].to_vec(),
        Matrix::from_vec(b, b, dx[..b * b].to_vec()).expect("sized"),
        Matrix::from_vec(b, m, dx[b * b..b * b + b * m].to_vec()).expect("sized"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::DistanceBlocks;
    use crate::select::solve_selection;

    fn line(points: &[f64], budget: usize, eps: f64) -> SelectionProblem {
        let b = points.len();
        let mut d = Matrix::zeros(b, b);
        for i in 0..b {
            for j in 0..b {
                d[(i, j)] = (points[i] - points[j]).abs();
            }
        }
        let blocks = DistanceBlocks::new(d, Matrix::zeros(b, 0)).unwrap();
        SelectionProblem::with_budget(blocks, budget, eps, 0.5).unwrap()
    }

    #[test]
    fn zero_upstream_gives_zero() {
        let p = line(&[0.0, 0.3, 0.7], 1, 1e-2);
        let s = solve_selection(&p).unwrap();
        let g = differentiate_selection(&p, &s, &[0.0; 3], None).unwrap();
        assert_eq!(g.d_new_new.max_abs(), 0.0);
    }

    #[test]
    fn pinned_single_point_has_no_sensitivity() {
        let p = line(&[1.0], 1, 1e-2);
        let s = solve_selection(&p).unwrap();
        let mut dz = Matrix::zeros(1, 1);
        dz[(0, 0)] = 2.0;
        let g = differentiate_selection(&p, &s, &[1.0], Some(&dz)).unwrap();
        assert!(g.d_new_new.max_abs() < 1e-9, "{:?}", g.d_new_new);
    }

    #[test]
    fn stale_solution_rejected() {
        let p = line(&[0.0, 0.3, 0.7], 1, 1e-2);
        let mut s = solve_selection(&p).unwrap();
        s.u[0] += 0.1;
        assert!(matches!(
            differentiate_selection(&p, &s, &[1.0, 0.0, 0.0], None),
            Err(Error::StaleSolution { .. })
        ));
        let other = line(&[0.0, 3.0, 0.7], 1, 1e-2);
        let s = solve_selection(&p).unwrap();
        assert!(differentiate_selection(&other, &s, &[1.0, 0.0, 0.0], None).is_err());
    }

    #[test]
    fn shape_checks() {
        let p = line(&[0.0, 0.3], 1, 1e-2);
        let s = solve_selection(&p).unwrap();
        assert!(differentiate_selection(&p, &s, &[1.0], None).is_err());
        assert!(differentiate_selection(&p, &s, &[1.0, 0.0], Some(&Matrix::zeros(3, 3))).is_err());
    }
}
