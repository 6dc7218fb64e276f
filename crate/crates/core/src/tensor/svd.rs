//! Thin SVD by one-sided (Hestenes) Jacobi rotations.

use super::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 60;

/// `a = u · diag(s) · vᵀ` with `k = min(rows, cols)` columns in `u` and `v`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        let k = self.s.len();
        for r in 0..us.rows() {
            for c in 0..k {
                let v = us.get(r, c) * self.s[c];
                us.set(r, c, v);
            }
        }
        us.matmul(&self.v.transpose()).expect("consistent svd factors")
    }
}

/// Deterministic thin SVD.
///
/// Singular values come out non-increasing. Each column of `u` has its
/// largest-magnitude entry positive (first one on ties) and `v` is flipped to
/// match.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if !a.is_finite() {
        return Err(Error::Numeric("svd input has non-finite entries".into()));
    }
    if a.rows() < a.cols() {
        let t = svd_tall(&a.transpose());
        return Ok(canonical_signs(SvdResult {
            u: t.v,
            s: t.s,
            v: t.u,
        }));
    }
    Ok(canonical_signs(svd_tall(a)))
}

/// One-sided Jacobi on a matrix with `rows >= cols`.
fn svd_tall(a: &Matrix) -> SvdResult {
    let m = a.rows();
    let n = a.cols();
    // Work on columns stored contiguously.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| a.column(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = gram(&cols[p], &cols[q]);
                if gamma == 0.0 {
                    continue;
                }
                // Skip pairs already orthogonal to working precision.
                if gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));

    let smax = order.first().map_or(0.0, |&i| sigma[i]);
    let null_tol = smax * (m.max(n) as f64) * f64::EPSILON * 8.0;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s_sorted = Vec::with_capacity(n);
    for &i in &order {
        let si = sigma[i];
        let mut u = if si > null_tol && si > 0.0 {
            cols[i].iter().map(|x| x / si).collect()
        } else {
            sigma[i] = 0.0;
            complete_basis(&u_cols, m)
        };
        // Second pass of Gram-Schmidt keeps columns orthonormal to 1e-15.
        if sigma[i] != 0.0 {
            orthogonalize(&mut u, &u_cols);
        }
        u_cols.push(u);
        v_cols.push(v[i].clone());
        s_sorted.push(sigma[i]);
    }

    SvdResult {
        u: from_columns(&u_cols, m),
        s: s_sorted,
        v: from_columns(&v_cols, n),
    }
}

/// Extends the orthonormal columns of `u` to `k` columns (`k <= u.rows()`).
pub(crate) fn extend_orthonormal(u: &Matrix, k: usize) -> Matrix {
    let mut cols: Vec<Vec<f64>> = (0..u.cols().min(k)).map(|c| u.column(c)).collect();
    while cols.len() < k {
        let next = complete_basis(&cols, u.rows());
        cols.push(next);
    }
    from_columns(&cols, u.rows())
}

fn gram(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let mut a = 0.0;
    let mut b = 0.0;
    let mut g = 0.0;
    for (&p, &q) in x.iter().zip(y) {
        a += p * p;
        b += q * q;
        g += p * q;
    }
    (a, b, g)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn orthogonalize(u: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let d: f64 = u.iter().zip(b).map(|(x, y)| x * y).sum();
        for (x, y) in u.iter_mut().zip(b) {
            *x -= d * y;
        }
    }
    let n = norm(u);
    if n > 0.0 {
        u.iter_mut().for_each(|x| *x /= n);
    }
}

/// A unit vector orthogonal to `basis`, built from the first standard basis
/// vector with a usable residual.
fn complete_basis(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for e in 0..m {
        let mut u = vec![0.0; m];
        u[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let d: f64 = u.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in u.iter_mut().zip(b) {
                    *x -= d * y;
                }
            }
        }
        let n = norm(&u);
        if n > 0.5 {
            u.iter_mut().for_each(|x| *x /= n);
            return u;
        }
        if best.as_ref().is_none_or(|(bn, _)| n > *bn) {
            best = Some((n, u));
        }
    }
    let (n, mut u) = best.expect("m > 0");
    u.iter_mut().for_each(|x| *x /= n);
    u
}

fn from_columns(cols: &[Vec<f64>], rows: usize) -> Matrix {
    let k = cols.len();
    let mut m = Matrix::zeros(rows, k);
    for (c, col) in cols.iter().enumerate() {
        for (r, &x) in col.iter().enumerate() {
            m.set(r, c, x);
        }
    }
    m
}

fn canonical_signs(mut r: SvdResult) -> SvdResult {
    for c in 0..r.s.len() {
        let mut pivot = 0.0f64;
        for row in 0..r.u.rows() {
            let x = r.u.get(row, c);
            if x.abs() > pivot.abs() {
                pivot = x;
            }
        }
        if pivot < 0.0 {
            for row in 0..r.u.rows() {
                let x = r.u.get(row, c);
                r.u.set(row, c, -x);
            }
            for row in 0..r.v.rows() {
                let x = r.v.get(row, c);
                r.v.set(row, c, -x);
            }
        }
    }
    r
}
