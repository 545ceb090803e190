use super::decomp::orthonormal_row_basis;
use super::matrix::{axpy, dot, norm, Matrix};
use crate::error::{arg_err, Result};

/// Default clamp for normalization denominators.
pub const NORM_EPS: f64 = 1e-12;

/// Cross-entropy of `softmax(logits)` against `target`, with its gradient
/// `softmax(logits) - onehot(target)`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return arg_err(format!("need at least 2 logits, got {}", logits.len()));
    }
    if target >= logits.len() {
        return arg_err(format!(
            "target index {target} out of range for {} logits",
            logits.len()
        ));
    }
    let mut grad = vec![0.0; logits.len()];
    let loss = softmax_xent_into(logits, target, &mut grad);
    Ok((loss, grad))
}

/// Unchecked cross-entropy kernel; writes the logit gradient into `grad`.
///
/// When the target logit is the largest the loss is computed as
/// `log1p(sum_{j != t} exp(l_j - l_t))`, which keeps full relative precision
/// for the exponentially small losses of saturated logits.
pub(crate) fn softmax_xent_into(logits: &[f64], target: usize, grad: &mut [f64]) -> f64 {
    let lt = logits[target];
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lt >= max {
        let mut rest = 0.0;
        for (j, (&l, g)) in logits.iter().zip(grad.iter_mut()).enumerate() {
            if j == target {
                *g = 0.0;
            } else {
                let e = (l - lt).exp();
                *g = e;
                rest += e;
            }
        }
        let denom = 1.0 + rest;
        for (j, g) in grad.iter_mut().enumerate() {
            if j == target {
                *g = -rest / denom;
            } else {
                *g /= denom;
            }
        }
        rest.ln_1p()
    } else {
        let mut sum = 0.0;
        for (g, &l) in grad.iter_mut().zip(logits) {
            let e = (l - max).exp();
            *g = e;
            sum += e;
        }
        for g in grad.iter_mut() {
            *g /= sum;
        }
        let rest: f64 = grad
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != target)
            .map(|(_, p)| p)
            .sum();
        grad[target] = -rest;
        sum.ln() - (lt - max)
    }
}

/// Divides each row by `max(norm, eps)`. Zero rows stay zero.
pub fn l2_normalize_rows(m: &Matrix, eps: f64) -> Matrix {
    let mut out = m.clone();
    l2_normalize_rows_in_place(&mut out, eps);
    out
}

pub fn l2_normalize_rows_in_place(m: &mut Matrix, eps: f64) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let n = norm(row).max(eps);
        row.iter_mut().for_each(|v| *v /= n);
    }
}

/// Removes from each row of `a` its orthogonal projection onto the row space
/// of `b`, so the result `R` satisfies `R bᵀ = 0`.
///
/// Dependent rows of `b` are dropped while building the basis, so
/// rank-deficient `b` is fine.
pub fn project_rows_to_nullspace(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return arg_err(format!(
            "column mismatch: a has {} columns, b has {}",
            a.cols(),
            b.cols()
        ));
    }
    let basis = orthonormal_row_basis(b, 1e-10);
    if basis.rows() == 0 {
        return arg_err("b has no nonzero rows");
    }
    Ok(remove_span(a, &basis))
}

/// Projects rows of `a` off the span of the orthonormal rows of `basis`.
pub(crate) fn remove_span(a: &Matrix, basis: &Matrix) -> Matrix {
    let mut out = a.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        // Two passes so the residual is orthogonal to working precision.
        for _ in 0..2 {
            for q in basis.row_iter() {
                let c = dot(row, q);
                axpy(-c, q, row);
            }
        }
    }
    out
}
