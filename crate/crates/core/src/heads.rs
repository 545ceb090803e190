//! Class and domain heads, the two-term multi-label loss, and the
//! orthogonality machinery.

use serde::{Deserialize, Serialize};

use crate::data::simplex_vertices;
use crate::error::{arg_err, CfaError, Result};
use crate::linalg::{
    dot, l2_normalize_rows_in_place, norm, orthonormal_row_basis, random_orthonormal, remove_span,
    softmax_xent_into, Matrix, RngState, NORM_EPS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Unit-norm rows, no bias; logits are `beta * W z`.
    NormalizedNoBias,
    /// Free rows plus biases; logits are `beta * W z + b`.
    UnconstrainedWithBias,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrthoMode {
    /// Soft constraint through `lambda_ortho * ||W1 W2ᵀ||²`.
    Penalty,
    /// Hard constraint: project W1 off the row space of W2 after each step.
    Projection,
}

/// Rows below this norm after projection count as degenerate.
const DEGENERATE_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadPair {
    pub w1: Matrix,
    pub w2: Matrix,
    pub beta1: f64,
    pub beta2: f64,
    pub mode: HeadMode,
    /// Empty in normalized mode.
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
}

impl HeadPair {
    /// Normalized heads; rows are rescaled to unit norm.
    pub fn normalized(w1: Matrix, w2: Matrix, beta1: f64, beta2: f64) -> Result<Self> {
        check_dims(&w1, &w2)?;
        check_beta(beta1)?;
        check_beta(beta2)?;
        let mut h = Self {
            w1,
            w2,
            beta1,
            beta2,
            mode: HeadMode::NormalizedNoBias,
            b1: Vec::new(),
            b2: Vec::new(),
        };
        l2_normalize_rows_in_place(&mut h.w1, NORM_EPS);
        l2_normalize_rows_in_place(&mut h.w2, NORM_EPS);
        Ok(h)
    }

    /// Unconstrained heads with zero biases.
    pub fn unconstrained(w1: Matrix, w2: Matrix, beta1: f64, beta2: f64) -> Result<Self> {
        check_dims(&w1, &w2)?;
        check_beta(beta1)?;
        check_beta(beta2)?;
        let (k, e) = (w1.rows(), w2.rows());
        Ok(Self {
            w1,
            w2,
            beta1,
            beta2,
            mode: HeadMode::UnconstrainedWithBias,
            b1: vec![0.0; k],
            b2: vec![0.0; e],
        })
    }

    /// Feasible heads whose rows are the first `K + E` rows of a random
    /// orthonormal matrix. Needs `d >= K + E`.
    pub fn orthonormal(k: usize, e: usize, d: usize, beta1: f64, beta2: f64, rng: &mut RngState) -> Result<Self> {
        if k == 0 || e == 0 || d < k + e {
            return arg_err(format!("orthonormal heads need K, E >= 1 and d >= K+E (K={k}, E={e}, d={d})"));
        }
        let q = random_orthonormal(d, rng)?;
        let w1 = q.select_rows(&(0..k).collect::<Vec<_>>());
        let w2 = q.select_rows(&(k..k + e).collect::<Vec<_>>());
        Self::normalized(w1, w2, beta1, beta2)
    }

    /// Feasible heads whose class rows form a simplex equiangular tight frame
    /// (pairwise cosine `-1/(K-1)`), likewise for the domain rows, in mutually
    /// orthogonal subspaces, then randomly rotated. A single class or domain
    /// gets one unit row in its own direction.
    pub fn simplex_etf(k: usize, e: usize, d: usize, beta1: f64, beta2: f64, rng: &mut RngState) -> Result<Self> {
        let dk = k.saturating_sub(1).max(1);
        let de = e.saturating_sub(1).max(1);
        if k == 0 || e == 0 || d < dk + de {
            return arg_err(format!("simplex heads need d >= {} (K={k}, E={e}, d={d})", dk + de));
        }
        let block = |count: usize, dim: usize| -> Result<Vec<Vec<f64>>> {
            if count == 1 {
                let mut v = vec![0.0; dim];
                v[0] = 1.0;
                Ok(vec![v])
            } else {
                simplex_vertices(count, dim)
            }
        };
        let cls = block(k, dk)?;
        let dom = block(e, de)?;
        let q = random_orthonormal(d, rng)?;
        let embed = |rows: &[Vec<f64>], offset: usize| {
            Matrix::from_fn(rows.len(), d, |i, j| {
                rows[i].iter().enumerate().map(|(t, v)| v * q.get(offset + t, j)).sum()
            })
        };
        Self::normalized(embed(&cls, 0), embed(&dom, dk), beta1, beta2)
    }

    pub fn num_classes(&self) -> usize {
        self.w1.rows()
    }

    pub fn num_domains(&self) -> usize {
        self.w2.rows()
    }

    pub fn dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn has_bias(&self) -> bool {
        self.mode == HeadMode::UnconstrainedWithBias
    }

    /// Class logits for one feature row.
    pub fn class_logits(&self, z: &[f64]) -> Vec<f64> {
        logits(&self.w1, &self.b1, self.beta1, z)
    }

    pub fn domain_logits(&self, z: &[f64]) -> Vec<f64> {
        logits(&self.w2, &self.b2, self.beta2, z)
    }

    /// Argmax class prediction per row of `z` (ties to the lower index).
    pub fn predict(&self, z: &Matrix) -> Vec<usize> {
        z.row_iter().map(|r| argmax(&self.class_logits(r))).collect()
    }

    pub fn predict_domain(&self, z: &Matrix) -> Vec<usize> {
        z.row_iter().map(|r| argmax(&self.domain_logits(r))).collect()
    }

    /// All parameters flattened in the fixed order `w1, w2, b1, b2`.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.w1.data().len() + self.w2.data().len() + self.b1.len() + self.b2.len());
        v.extend_from_slice(self.w1.data());
        v.extend_from_slice(self.w2.data());
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.b2);
        v
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let n1 = self.w1.data().len();
        let n2 = self.w2.data().len();
        let (nb1, nb2) = (self.b1.len(), self.b2.len());
        if flat.len() != n1 + n2 + nb1 + nb2 {
            return arg_err(format!("expected {} head parameters, got {}", n1 + n2 + nb1 + nb2, flat.len()));
        }
        self.w1.data_mut().copy_from_slice(&flat[..n1]);
        self.w2.data_mut().copy_from_slice(&flat[n1..n1 + n2]);
        self.b1.copy_from_slice(&flat[n1 + n2..n1 + n2 + nb1]);
        self.b2.copy_from_slice(&flat[n1 + n2 + nb1..]);
        Ok(())
    }
}

fn check_dims(w1: &Matrix, w2: &Matrix) -> Result<()> {
    if w1.rows() == 0 || w2.rows() == 0 {
        return arg_err("heads need at least one row each");
    }
    if w1.cols() != w2.cols() {
        return arg_err(format!("head widths differ: {} vs {}", w1.cols(), w2.cols()));
    }
    if !w1.is_finite() || !w2.is_finite() {
        return arg_err("head weights must be finite");
    }
    Ok(())
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return arg_err(format!("logit scale must be positive and finite, got {beta}"));
    }
    Ok(())
}

fn logits(w: &Matrix, b: &[f64], beta: f64, z: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = w.row_iter().map(|r| beta * dot(r, z)).collect();
    for (o, bi) in out.iter_mut().zip(b) {
        *o += bi;
    }
    out
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Simplex-encoding label matrix: column `i` is `onehot(labels[i]) - 1/C`.
pub fn build_sel(labels: &[usize], num_labels: usize) -> Result<Matrix> {
    if num_labels == 0 {
        return arg_err("label count must be positive");
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_labels) {
        return arg_err(format!("label {bad} out of range for C={num_labels}"));
    }
    let off = 1.0 / num_labels as f64;
    Ok(Matrix::from_fn(num_labels, labels.len(), |c, i| {
        if labels[i] == c {
            1.0 - off
        } else {
            -off
        }
    }))
}

/// `||w1 w2ᵀ||_F²` and its gradient `2 (w1 w2ᵀ) w2` with respect to `w1`.
pub fn ortho_penalty(w1: &Matrix, w2: &Matrix) -> Result<(f64, Matrix)> {
    if w1.cols() != w2.cols() {
        return arg_err(format!("head widths differ: {} vs {}", w1.cols(), w2.cols()));
    }
    let g = w1.matmul_t(w2);
    let value = g.frobenius_dot(&g);
    Ok((value, g.matmul(w2).scale(2.0)))
}

/// Loss value, its two terms, and gradients of [`cfa_loss`].
#[derive(Clone, Debug)]
pub struct CfaLoss {
    pub loss: f64,
    /// `(1/K)`-scaled mean class cross-entropy.
    pub class_term: f64,
    /// `(1/E)`-scaled mean domain cross-entropy over present labels, before `lambda`.
    pub domain_term: f64,
    pub grad_z: Matrix,
    pub grad_w1: Matrix,
    pub grad_w2: Matrix,
    pub grad_b1: Vec<f64>,
    pub grad_b2: Vec<f64>,
}

/// Per-sample weights for the two loss terms. `None` means uniform.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossWeights<'a> {
    pub class: Option<&'a [f64]>,
    pub domain: Option<&'a [f64]>,
}

/// `(1/N) Σ (1/K) CE(β1 W1 zᵢ, yᵢ) + λ (1/E) mean_{present} CE(β2 W2 zᵢ, eᵢ)`
/// with exact gradients for `z`, both heads and (if present) the biases.
///
/// The domain term averages over samples whose domain label is present and is
/// skipped entirely when `lambda == 0` or no label is present.
pub fn cfa_loss(
    heads: &HeadPair,
    z: &Matrix,
    y: &[usize],
    e: &[usize],
    present: &[bool],
    lambda: f64,
) -> Result<CfaLoss> {
    cfa_loss_weighted(heads, z, y, e, present, lambda, LossWeights::default())
}

/// [`cfa_loss`] with per-sample weights: each term becomes a weighted mean
/// (normalized by the total weight of the samples it covers).
pub fn cfa_loss_weighted(
    heads: &HeadPair,
    z: &Matrix,
    y: &[usize],
    e: &[usize],
    present: &[bool],
    lambda: f64,
    weights: LossWeights<'_>,
) -> Result<CfaLoss> {
    let n = z.rows();
    let (k, ecount, d) = (heads.num_classes(), heads.num_domains(), heads.dim());
    if z.cols() != d {
        return arg_err(format!("features have width {}, heads expect {d}", z.cols()));
    }
    if y.len() != n || e.len() != n || present.len() != n {
        return arg_err("label arrays must match the feature rows");
    }
    if n == 0 {
        return arg_err("cfa_loss needs at least one sample");
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return arg_err(format!("lambda must be finite and >= 0, got {lambda}"));
    }
    if y.iter().any(|&v| v >= k) || e.iter().zip(present).any(|(&v, &p)| p && v >= ecount) {
        return arg_err("label out of range");
    }
    for w in [weights.class, weights.domain].into_iter().flatten() {
        if w.len() != n || w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return arg_err("sample weights must be finite, non-negative and one per sample");
        }
    }

    let cw = |i: usize| weights.class.map_or(1.0, |w| w[i]);
    let dw = |i: usize| weights.domain.map_or(1.0, |w| w[i]);
    let class_total: f64 = (0..n).map(cw).sum();
    if class_total <= 0.0 {
        return arg_err("class weights sum to zero");
    }
    let use_domain = lambda > 0.0;
    let domain_total: f64 = if use_domain {
        (0..n).filter(|&i| present[i]).map(dw).sum()
    } else {
        0.0
    };
    let use_domain = use_domain && domain_total > 0.0;

    let mut out = CfaLoss {
        loss: 0.0,
        class_term: 0.0,
        domain_term: 0.0,
        grad_z: Matrix::zeros(n, d),
        grad_w1: Matrix::zeros(k, d),
        grad_w2: Matrix::zeros(ecount, d),
        grad_b1: vec![0.0; heads.b1.len()],
        grad_b2: vec![0.0; heads.b2.len()],
    };
    let class_scale = 1.0 / (k as f64 * class_total);
    let domain_scale = if use_domain {
        lambda / (ecount as f64 * domain_total)
    } else {
        0.0
    };

    let mut g1 = vec![0.0; k];
    let mut g2 = vec![0.0; ecount];
    for i in 0..n {
        let zi = z.row(i);
        let wi = cw(i) * class_scale;
        let l1 = heads.class_logits(zi);
        let ce1 = softmax_xent_into(&l1, y[i], &mut g1);
        out.class_term += cw(i) * ce1;
        if wi != 0.0 {
            accumulate(&heads.w1, heads.beta1, wi, &g1, zi, out.grad_z.row_mut(i), &mut out.grad_w1, &mut out.grad_b1);
        }
        if use_domain && present[i] {
            let vi = dw(i) * domain_scale;
            let l2 = heads.domain_logits(zi);
            let ce2 = softmax_xent_into(&l2, e[i], &mut g2);
            out.domain_term += dw(i) * ce2;
            if vi != 0.0 {
                accumulate(&heads.w2, heads.beta2, vi, &g2, zi, out.grad_z.row_mut(i), &mut out.grad_w2, &mut out.grad_b2);
            }
        }
    }
    out.class_term /= k as f64 * class_total;
    if use_domain {
        out.domain_term /= ecount as f64 * domain_total;
    }
    out.loss = out.class_term + lambda * out.domain_term;
    Ok(out)
}

/// Adds `scale * d(CE)/d(logits) = scale * g` back through `logits = beta W z + b`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate(w: &Matrix, beta: f64, scale: f64, g: &[f64], z: &[f64], gz: &mut [f64], gw: &mut Matrix, gb: &mut [f64]) {
    for (c, &gc) in g.iter().enumerate() {
        let s = scale * gc;
        if s == 0.0 {
            continue;
        }
        let sb = s * beta;
        for (o, &wv) in gz.iter_mut().zip(w.row(c)) {
            *o += sb * wv;
        }
        for (o, &zv) in gw.row_mut(c).iter_mut().zip(z) {
            *o += sb * zv;
        }
        if let Some(b) = gb.get_mut(c) {
            *b += s;
        }
    }
}

/// Weighted mean cross-entropy of a single head, `Σ wᵢ CEᵢ / Σ wᵢ`, with its
/// gradients for the head rows and bias. Samples with zero weight are skipped.
pub(crate) fn head_ce(
    w: &Matrix,
    b: &[f64],
    beta: f64,
    z: &Matrix,
    labels: &[usize],
    weights: &[f64],
) -> (f64, Matrix, Vec<f64>) {
    let total: f64 = weights.iter().sum();
    let mut gw = Matrix::zeros(w.rows(), w.cols());
    let mut gb = vec![0.0; b.len()];
    if total <= 0.0 {
        return (0.0, gw, gb);
    }
    let mut g = vec![0.0; w.rows()];
    let mut loss = 0.0;
    for i in 0..z.rows() {
        let wi = weights[i];
        if wi == 0.0 {
            continue;
        }
        let zi = z.row(i);
        let l = logits(w, b, beta, zi);
        loss += wi * softmax_xent_into(&l, labels[i], &mut g);
        let s = wi / total;
        for (c, &gc) in g.iter().enumerate() {
            let sc = s * gc;
            for (o, &zv) in gw.row_mut(c).iter_mut().zip(zi) {
                *o += sc * beta * zv;
            }
            if let Some(bb) = gb.get_mut(c) {
                *bb += sc;
            }
        }
    }
    (loss / total, gw, gb)
}

/// Renormalizes rows; under [`OrthoMode::Projection`] also projects `w1` off
/// the row space of `w2` and renormalizes, so `w1 w2ᵀ = 0`.
///
/// A class row lying inside the domain row space is reported as
/// [`CfaError::DegenerateRow`]; see [`retract_heads_repair`] for a recovering variant.
pub fn retract_heads(heads: &HeadPair, ortho: OrthoMode) -> Result<HeadPair> {
    retract_impl(heads, ortho, None)
}

/// Like [`retract_heads`], but degenerate class rows are redrawn at random in
/// the orthogonal complement of the domain rows.
pub fn retract_heads_repair(heads: &HeadPair, ortho: OrthoMode, rng: &mut RngState) -> Result<HeadPair> {
    retract_impl(heads, ortho, Some(rng))
}

fn retract_impl(heads: &HeadPair, ortho: OrthoMode, mut rng: Option<&mut RngState>) -> Result<HeadPair> {
    if heads.mode != HeadMode::NormalizedNoBias {
        return arg_err("retraction applies to normalized heads only");
    }
    let mut out = heads.clone();
    l2_normalize_rows_in_place(&mut out.w2, NORM_EPS);
    if ortho == OrthoMode::Projection {
        let basis = orthonormal_row_basis(&out.w2, 1e-10);
        let mut projected = remove_span(&out.w1, &basis);
        for r in 0..projected.rows() {
            let n0 = norm(out.w1.row(r)).max(NORM_EPS);
            if norm(projected.row(r)) / n0 >= DEGENERATE_TOL {
                continue;
            }
            let Some(rng) = rng.as_deref_mut() else {
                return Err(CfaError::DegenerateRow { row: r });
            };
            let mut fresh = Matrix::zeros(1, projected.cols());
            let mut tries = 0;
            while norm(fresh.row(0)) < 1e-3 {
                tries += 1;
                if tries > 100 {
                    return Err(CfaError::DegenerateRow { row: r });
                }
                let g = Matrix::from_vec(1, projected.cols(), rng.normal_vec(projected.cols()))?;
                fresh = remove_span(&g, &basis);
            }
            projected.row_mut(r).copy_from_slice(fresh.row(0));
        }
        out.w1 = projected;
    }
    l2_normalize_rows_in_place(&mut out.w1, NORM_EPS);
    Ok(out)
}
