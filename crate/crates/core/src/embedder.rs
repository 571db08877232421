//! Learned embedding and the L1 distances that parameterize the selection program.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{mlp_backward, mlp_forward, ForwardTrace, Matrix, MlpParams};

/// Distances among the current minibatch and from it to the old set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceBlocks {
    /// `[B x B]`, symmetric with zero diagonal.
    pub d_new_new: Matrix,
    /// `[B x M]`
    pub d_new_old: Matrix,
}

impl DistanceBlocks {
    pub fn new(d_new_new: Matrix, d_new_old: Matrix) -> Result<Self> {
        let b = d_new_new.rows();
        if d_new_new.cols() != b {
            return Err(Error::dim("d_new_new columns", b, d_new_new.cols()));
        }
        if d_new_old.rows() != b {
            return Err(Error::dim("d_new_old rows", b, d_new_old.rows()));
        }
        let finite_nonneg = |m: &Matrix| m.as_slice().iter().all(|v| v.is_finite() && *v >= 0.0);
        if !finite_nonneg(&d_new_new) || !finite_nonneg(&d_new_old) {
            return Err(Error::InvalidArgument(
                "distances must be finite and nonnegative".into(),
            ));
        }
        Ok(DistanceBlocks {
            d_new_new,
            d_new_old,
        })
    }

    pub fn num_new(&self) -> usize {
        self.d_new_new.rows()
    }

    pub fn num_old(&self) -> usize {
        self.d_new_old.cols()
    }
}

pub fn embed(phi: &MlpParams, x: &Matrix) -> Result<(Matrix, ForwardTrace)> {
    mlp_forward(phi, x)
}

/// `sum_k |a_k - b_k|`
#[inline]
pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

pub fn distance_blocks(h_new: &Matrix, h_old: &Matrix) -> Result<DistanceBlocks> {
    let b = h_new.rows();
    let m = h_old.rows();
    if m > 0 && h_old.cols() != h_new.cols() {
        return Err(Error::dim("old-set embedding dim", h_new.cols(), h_old.cols()));
    }
    let mut nn = Matrix::zeros(b, b);
    for i in 0..b {
        for j in (i + 1)..b {
            let d = l1(h_new.row(i), h_new.row(j));
            nn[(i, j)] = d;
            nn[(j, i)] = d;
        }
    }
    let mut no = Matrix::zeros(b, m);
    for i in 0..b {
        for j in 0..m {
            no[(i, j)] = l1(h_new.row(i), h_old.row(j));
        }
    }
    DistanceBlocks::new(nn, no)
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradients of `sum_ij G_ij d_ij` with respect to the embeddings themselves.
pub fn distance_grad_embeddings(
    h_new: &Matrix,
    h_old: &Matrix,
    g_new_new: &Matrix,
    g_new_old: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let (b, m, e) = (h_new.rows(), h_old.rows(), h_new.cols());
    if g_new_new.rows() != b || g_new_new.cols() != b {
        return Err(Error::dim("d_new_new gradient", b * b, g_new_new.rows() * g_new_new.cols()));
    }
    if g_new_old.rows() != b || g_new_old.cols() != m {
        return Err(Error::dim("d_new_old gradient", b * m, g_new_old.rows() * g_new_old.cols()));
    }
    let mut dh_new = Matrix::zeros(b, e);
    let mut dh_old = Matrix::zeros(m, e);
    for i in 0..b {
        for j in 0..b {
            let g = g_new_new[(i, j)];
            if g == 0.0 || i == j {
                continue;
            }
            for k in 0..e {
                let s = g * sign(h_new[(i, k)] - h_new[(j, k)]);
                dh_new[(i, k)] += s;
                dh_new[(j, k)] -= s;
            }
        }
        for j in 0..m {
            let g = g_new_old[(i, j)];
            if g == 0.0 {
                continue;
            }
            for k in 0..e {
                let s = g * sign(h_new[(i, k)] - h_old[(j, k)]);
                dh_new[(i, k)] += s;
                dh_old[(j, k)] -= s;
            }
        }
    }
    Ok((dh_new, dh_old))
}

/// Reverse-mode gradient of `sum_ij G_ij d_ij` through the L1 distances and
/// the embedding network, for both blocks. `trace_old` may be `None` when the
/// old set is empty.
pub fn distance_backward(
    phi: &MlpParams,
    trace_new: &ForwardTrace,
    trace_old: Option<&ForwardTrace>,
    g_new_new: &Matrix,
    g_new_old: &Matrix,
) -> Result<MlpParams> {
    let empty = Matrix::zeros(0, phi.out_dim());
    let h_old = trace_old.map_or(&empty, |t| t.output());
    let (dh_new, dh_old) =
        distance_grad_embeddings(trace_new.output(), h_old, g_new_new, g_new_old)?;
    let (mut grad, _) = mlp_backward(phi, trace_new, &dh_new)?;
    if let Some(t) = trace_old {
        if t.batch_size() > 0 {
            let (g_old, _) = mlp_backward(phi, t, &dh_old)?;
            grad.add_scaled(&g_old, 1.0)?;
        }
    }
    Ok(grad)
}
