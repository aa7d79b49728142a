//! Dense kernels and the top-r singular value decomposition.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

// Below this many multiply-adds a matmul stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

fn row_kernel(out: &mut [f64], a_row: &[f64], b: &[f64], n: usize) {
    for (p, &av) in a_row.iter().enumerate() {
        if av == 0.0 {
            continue;
        }
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

/// `a (m×k) · b (k×n)`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(o, a_row)| row_kernel(o, a_row, b, n));
    } else {
        for (o, a_row) in out.chunks_mut(n).zip(a.chunks(k)) {
            row_kernel(o, a_row, b, n);
        }
    }
    out
}

/// `a (m×k) · bᵀ` where `b` is `n×k`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let kernel = |(o, a_row): (&mut [f64], &[f64])| {
        for (j, oj) in o.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *oj = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).zip(a.par_chunks(k)).for_each(kernel);
    } else {
        out.chunks_mut(n).zip(a.chunks(k)).for_each(kernel);
    }
    out
}

/// `aᵀ · b` where `a` is `m×k` and `b` is `m×n`; result `k×n`.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let at = transpose(a, m, k);
    matmul(&at, b, k, m, n)
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Truncated singular value decomposition `M ≈ U_r · diag(S_r) · V_rᵀ`.
#[derive(Clone, Debug)]
pub struct Svd {
    /// m×r, orthonormal columns.
    pub u: Tensor,
    /// r values, nonincreasing.
    pub s: Vec<f64>,
    /// n×r, orthonormal columns.
    pub v: Tensor,
}

impl Svd {
    pub fn reconstruct(&self) -> Tensor {
        let (m, r) = (self.u.rows(), self.u.cols());
        let mut us = self.u.clone();
        for i in 0..m {
            for j in 0..r {
                us.data_mut()[i * r + j] *= self.s[j];
            }
        }
        Tensor::from_parts(
            vec![m, self.v.rows()],
            matmul_nt(us.data(), self.v.data(), m, r, self.v.rows()),
        )
    }
}

/// Top-`r` SVD of a finite matrix by one-sided Jacobi rotations.
pub fn svd_topk(m: &Tensor, r: usize) -> Result<Svd> {
    let (rows, cols) = (m.rows(), m.cols());
    if r == 0 || r > rows.min(cols) {
        return Err(Error::InvalidArgument(format!(
            "svd rank {r} outside 1..={} for a {rows}x{cols} matrix",
            rows.min(cols)
        )));
    }
    m.ensure_finite("svd_topk")?;
    // Jacobi orthogonalises columns; work on the transpose of wide matrices
    // so the column count is the smaller dimension.
    if rows < cols {
        let svd = svd_topk(&m.transpose(), r)?;
        return Ok(Svd {
            u: svd.v,
            s: svd.s,
            v: svd.u,
        });
    }
    let (u_full, s_full, v_full) = one_sided_jacobi(m.data(), rows, cols);
    let mut order: Vec<usize> = (0..cols).collect();
    // Stable sort keeps ties in column order for reproducibility.
    order.sort_by(|&a, &b| s_full[b].total_cmp(&s_full[a]));

    let mut u = vec![0.0; rows * r];
    let mut v = vec![0.0; cols * r];
    let mut s = Vec::with_capacity(r);
    for (j, &src) in order.iter().take(r).enumerate() {
        s.push(s_full[src]);
        for i in 0..rows {
            u[i * r + j] = u_full[i * cols + src];
        }
        for i in 0..cols {
            v[i * r + j] = v_full[i * cols + src];
        }
    }
    complete_orthonormal(&mut u, rows, r, &s);
    Ok(Svd {
        u: Tensor::from_parts(vec![rows, r], u),
        s,
        v: Tensor::from_parts(vec![cols, r], v),
    })
}

/// Returns `(U m×n, σ n, V n×n)` for `m ≥ n`; columns of `U` belonging to
/// zero singular values are left zero.
fn one_sided_jacobi(a: &[f64], m: usize, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    // Column-major working copies make the inner rotations contiguous.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[i * n + j]).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let tol = f64::EPSILON;
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for i in 0..m {
                        alpha += cp[i] * cp[i];
                        beta += cq[i] * cq[i];
                        gamma += cp[i] * cq[i];
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let sigma: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let smax = sigma.iter().cloned().fold(0.0, f64::max);
    let mut u = vec![0.0; m * n];
    for (j, c) in cols.iter().enumerate() {
        if sigma[j] > smax * 1e-14 && sigma[j] > 0.0 {
            for i in 0..m {
                u[i * n + j] = c[i] / sigma[j];
            }
        }
    }
    let mut v = vec![0.0; n * n];
    for (j, c) in vcols.iter().enumerate() {
        for i in 0..n {
            v[i * n + j] = c[i];
        }
    }
    (u, sigma, v)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Replaces zero columns of `u` (m×r) by unit vectors orthogonal to the
/// others, so rank-deficient inputs still yield an orthonormal basis.
fn complete_orthonormal(u: &mut [f64], m: usize, r: usize, s: &[f64]) {
    let smax = s.iter().cloned().fold(0.0, f64::max);
    for j in 0..r {
        let norm: f64 = (0..m).map(|i| u[i * r + j].powi(2)).sum::<f64>().sqrt();
        if norm > 0.5 && s[j] > smax * 1e-14 {
            continue;
        }
        for basis in 0..m {
            let mut cand: Vec<f64> = (0..m).map(|i| if i == basis { 1.0 } else { 0.0 }).collect();
            // Two Gram-Schmidt passes against every other column.
            for _ in 0..2 {
                for k in 0..r {
                    if k == j {
                        continue;
                    }
                    let dot: f64 = (0..m).map(|i| cand[i] * u[i * r + k]).sum();
                    for i in 0..m {
                        cand[i] -= dot * u[i * r + k];
                    }
                }
            }
            let n: f64 = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                for i in 0..m {
                    u[i * r + j] = cand[i] / n;
                }
                break;
            }
        }
    }
}
