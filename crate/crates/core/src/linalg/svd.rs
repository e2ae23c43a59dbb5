//! One-sided (Hestenes) Jacobi SVD.
//!
//! Jacobi rotations are applied in a fixed cyclic order, so the factors are a
//! deterministic function of the input. Left singular vectors are sign-fixed
//! so that their first nonzero entry is positive.

use serde::{Deserialize, Serialize};

use super::matrix::{dot, DenseMatrix};
use crate::error::{Error, Result};

pub const MAX_SWEEPS: usize = 80;

/// Thin SVD `w = u * diag(sigma) * v_t` with `r = min(m, n)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    pub v_t: DenseMatrix,
}

impl SvdFactors {
    pub fn rank_capacity(&self) -> usize {
        self.sigma.len()
    }

    /// `u_r * diag(sigma_r) * v_t_r`, keeping the leading `rank` triplets.
    pub fn reconstruct(&self, rank: usize) -> DenseMatrix {
        let rank = rank.min(self.sigma.len());
        let (m, n) = (self.u.rows(), self.v_t.cols());
        let mut out = DenseMatrix::zeros(m, n);
        for j in 0..rank {
            let s = self.sigma[j];
            if s == 0.0 {
                continue;
            }
            let v_row = self.v_t.row(j);
            for i in 0..m {
                let a = self.u[(i, j)] * s;
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out.row_mut(i).iter_mut().zip(v_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn energy(&self) -> f64 {
        self.sigma.iter().map(|s| s * s).sum()
    }
}

/// Full thin SVD of an `m x n` matrix.
pub fn svd_full(w: &DenseMatrix) -> Result<SvdFactors> {
    let (m, n) = w.shape();
    if m == 0 || n == 0 {
        return Err(Error::ShapeMismatch(format!("svd of empty {m}x{n} matrix")));
    }
    if !w.is_finite() {
        return Err(Error::NonFinite);
    }
    if m >= n {
        let (u_cols, sigma, v_cols) = hestenes(w.to_columns(), m)?;
        Ok(finish(u_cols, sigma, v_cols, m, n))
    } else {
        // w^T = U' S V'^T  =>  w = V' S U'^T
        let (u_cols, sigma, v_cols) = hestenes(w.to_rows(), n)?;
        Ok(finish(v_cols, sigma, u_cols, m, n))
    }
}

/// Orthogonalizes the columns of a tall matrix. Returns (normalized left
/// vectors, singular values, right vectors), each as column lists sorted by
/// descending singular value. Left vectors for zero singular values are
/// completed to an orthonormal set.
fn hestenes(mut cols: Vec<Vec<f64>>, m: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>)> {
    let n = cols.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            e
        })
        .collect();
    let tol = f64::EPSILON * (m as f64).max(1.0);

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence(MAX_SWEEPS));
    }

    let mut sigma: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps index order for ties
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));

    let mut u_cols = Vec::with_capacity(n);
    let mut v_cols = Vec::with_capacity(n);
    let mut sorted_sigma = Vec::with_capacity(n);
    let mut null_slots = Vec::new();
    for (slot, &k) in order.iter().enumerate() {
        let s = sigma[k];
        if s > 0.0 && s.is_normal() {
            u_cols.push(cols[k].iter().map(|x| x / s).collect());
            sorted_sigma.push(s);
        } else {
            u_cols.push(vec![0.0; m]);
            sorted_sigma.push(0.0);
            null_slots.push(slot);
        }
        v_cols.push(std::mem::take(&mut v[k]));
    }
    sigma.clear();
    complete_basis(&mut u_cols, &null_slots, m);
    Ok((u_cols, sorted_sigma, v_cols))
}

#[inline]
fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(j);
    let ci = &mut left[i];
    let cj = &mut right[0];
    for (a, b) in ci.iter_mut().zip(cj.iter_mut()) {
        let x = *a;
        let y = *b;
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Fills the listed columns with unit vectors orthogonal to every other
/// column, trying standard basis vectors in order.
pub(crate) fn complete_basis(cols: &mut [Vec<f64>], slots: &[usize], m: usize) {
    if slots.is_empty() {
        return;
    }
    let mut filled: Vec<bool> = vec![true; cols.len()];
    for &s in slots {
        filled[s] = false;
    }
    let mut candidate = 0;
    for &slot in slots {
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            // two passes of Gram-Schmidt
            for _ in 0..2 {
                for (k, c) in cols.iter().enumerate() {
                    if filled[k] {
                        let p = dot(&e, c);
                        for (x, y) in e.iter_mut().zip(c) {
                            *x -= p * y;
                        }
                    }
                }
            }
            let nrm = dot(&e, &e).sqrt();
            if nrm > 1e-6 {
                cols[slot] = e.iter().map(|x| x / nrm).collect();
                filled[slot] = true;
                break;
            }
        }
    }
}

fn finish(
    mut u_cols: Vec<Vec<f64>>,
    sigma: Vec<f64>,
    mut v_cols: Vec<Vec<f64>>,
    m: usize,
    n: usize,
) -> SvdFactors {
    for (u, v) in u_cols.iter_mut().zip(v_cols.iter_mut()) {
        let flip = u
            .iter()
            .find(|x| x.abs() > 1e-12)
            .is_some_and(|&x| x < 0.0);
        if flip {
            u.iter_mut().for_each(|x| *x = -*x);
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    let r = sigma.len();
    let u = DenseMatrix::from_fn(m, r, |i, j| u_cols[j][i]);
    let v_t = DenseMatrix::from_fn(r, n, |i, j| v_cols[i][j]);
    SvdFactors { u, sigma, v_t }
}
