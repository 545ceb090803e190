//! Small dense factorizations: one-sided Jacobi SVD, Householder QR,
//! semidefinite Cholesky and Gram-Schmidt row bases.

use super::matrix::{axpy, dot, norm, Matrix};
use super::rng::RngState;
use crate::error::{arg_err, Result};

const MAX_SWEEPS: usize = 80;

/// Compact SVD `m = U diag(S) Vᵀ`.
///
/// `u` is `rows x r`, `v` is `cols x r`, `s` holds the `r` positive singular
/// values in nonincreasing order.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.s.iter().enumerate() {
                let v = us.get(i, j) * s;
                us.set(i, j, v);
            }
        }
        us.matmul_t(&self.v)
    }

    /// Moore-Penrose pseudo-inverse `V diag(1/S) Uᵀ`.
    pub fn pinv(&self) -> Matrix {
        let mut vs = self.v.clone();
        for i in 0..vs.rows() {
            for (j, s) in self.s.iter().enumerate() {
                let v = vs.get(i, j) / s;
                vs.set(i, j, v);
            }
        }
        vs.matmul_t(&self.u)
    }
}

/// Compact SVD via one-sided (Hestenes) Jacobi rotations.
///
/// Singular values below `max(rows, cols) * eps * s_max` are dropped. A zero
/// matrix yields rank 0.
pub fn svd_compact(m: &Matrix) -> Svd {
    if m.rows() < m.cols() {
        let t = svd_compact(&m.transpose());
        return Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        };
    }
    let (rows, cols) = m.shape();
    // Work column-wise: store Aᵀ so each column of A is a contiguous row.
    let mut a = m.transpose();
    let mut v = Matrix::identity(cols);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let alpha = dot(a.row(p), a.row(p));
                let beta = dot(a.row(q), a.row(q));
                let gamma = dot(a.row(p), a.row(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut a, p, q, c, s);
                rotate_rows(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(usize, f64)> = (0..cols).map(|j| (j, norm(a.row(j)))).collect();
    // Stable sort keeps ties in column order, so output is deterministic.
    order.sort_by(|x, y| y.1.total_cmp(&x.1));
    let s_max = order.first().map_or(0.0, |o| o.1);
    let tol = rows.max(cols) as f64 * f64::EPSILON * s_max;
    let kept: Vec<(usize, f64)> = order.into_iter().filter(|o| o.1 > tol && o.1 > 0.0).collect();

    let r = kept.len();
    let mut u = Matrix::zeros(rows, r);
    let mut vv = Matrix::zeros(cols, r);
    let mut s = Vec::with_capacity(r);
    for (k, &(j, sigma)) in kept.iter().enumerate() {
        s.push(sigma);
        for i in 0..rows {
            u.set(i, k, a.get(j, i) / sigma);
        }
        // v holds Vᵀ rows after the rotations applied on its rows.
        for i in 0..cols {
            vv.set(i, k, v.get(j, i));
        }
    }
    Svd { u, s, v: vv }
}

fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = m.cols();
    let data = m.data_mut();
    for k in 0..n {
        let xp = data[p * n + k];
        let xq = data[q * n + k];
        data[p * n + k] = c * xp - s * xq;
        data[q * n + k] = s * xp + c * xq;
    }
}

/// Householder QR of a square or tall matrix: returns full `Q` (`rows x rows`)
/// and `R` (`rows x cols`).
pub fn householder_qr(a: &Matrix) -> (Matrix, Matrix) {
    let (m, n) = a.shape();
    assert!(m >= n, "householder_qr needs rows >= cols");
    let mut r = a.clone();
    let mut q = Matrix::identity(m);
    for k in 0..n {
        let x: Vec<f64> = (k..m).map(|i| r.get(i, k)).collect();
        let xnorm = norm(&x);
        if xnorm == 0.0 {
            continue;
        }
        let alpha = if x[0] >= 0.0 { -xnorm } else { xnorm };
        let mut vk = x;
        vk[0] -= alpha;
        let vnorm = norm(&vk);
        if vnorm == 0.0 {
            continue;
        }
        vk.iter_mut().for_each(|v| *v /= vnorm);
        // R <- H R
        for j in 0..n {
            let proj: f64 = (k..m).map(|i| vk[i - k] * r.get(i, j)).sum();
            for i in k..m {
                let val = r.get(i, j) - 2.0 * vk[i - k] * proj;
                r.set(i, j, val);
            }
        }
        // Q <- Q H
        for i in 0..m {
            let proj: f64 = (k..m).map(|l| q.get(i, l) * vk[l - k]).sum();
            for l in k..m {
                let val = q.get(i, l) - 2.0 * proj * vk[l - k];
                q.set(i, l, val);
            }
        }
    }
    (q, r)
}

/// Haar-distributed orthonormal `d x d` matrix: QR of a Gaussian matrix with
/// columns of `Q` sign-corrected so `R` has a positive diagonal.
pub fn random_orthonormal(d: usize, rng: &mut RngState) -> Result<Matrix> {
    if d == 0 {
        return arg_err("random_orthonormal requires d >= 1");
    }
    let g = Matrix::from_vec(d, d, rng.normal_vec(d * d))?;
    let (mut q, r) = householder_qr(&g);
    for j in 0..d {
        if r.get(j, j) < 0.0 {
            for i in 0..d {
                let v = -q.get(i, j);
                q.set(i, j, v);
            }
        }
    }
    Ok(q)
}

/// Lower-triangular `L` with `L Lᵀ = sigma` for symmetric positive
/// semidefinite `sigma`. Pivots below a relative tolerance are treated as
/// exact zeros, so singular covariances (including the zero matrix) work.
pub fn psd_cholesky(sigma: &Matrix) -> Result<Matrix> {
    let n = sigma.rows();
    if sigma.cols() != n {
        return arg_err("covariance must be square");
    }
    let scale = (0..n).map(|i| sigma.get(i, i).abs()).fold(0.0, f64::max);
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in 0..i {
            if (sigma.get(i, j) - sigma.get(j, i)).abs() > 1e-10 * scale.max(1.0) {
                return arg_err("covariance is not symmetric");
            }
        }
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = sigma.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if d < -1e-9 * scale.max(1.0) {
            return arg_err("covariance is not positive semidefinite");
        }
        if d <= tol {
            // Remaining entries of this column must vanish for a PSD input.
            for i in (j + 1)..n {
                let mut s = sigma.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                if s.abs() > 1e-8 * scale.max(1.0) {
                    return arg_err("covariance is not positive semidefinite");
                }
            }
            continue;
        }
        let ljj = d.sqrt();
        l.set(j, j, ljj);
        for i in (j + 1)..n {
            let mut s = sigma.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / ljj);
        }
    }
    Ok(l)
}

/// Orthonormal basis (as rows) of the row space of `b`, by modified
/// Gram-Schmidt with one re-orthogonalization pass. Rows whose residual is
/// below `rel_tol` times their original norm are dependent and skipped.
pub fn orthonormal_row_basis(b: &Matrix, rel_tol: f64) -> Matrix {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for row in b.row_iter() {
        let n0 = norm(row);
        if n0 == 0.0 {
            continue;
        }
        let mut v = row.to_vec();
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&v, q);
                axpy(-c, q, &mut v);
            }
        }
        let n = norm(&v);
        if n > rel_tol * n0 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    if basis.is_empty() {
        return Matrix::zeros(0, b.cols());
    }
    Matrix::from_rows(&basis).expect("basis rows share a length")
}
