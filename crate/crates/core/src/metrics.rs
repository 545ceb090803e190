use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, CfaError, Result};
use crate::heads::HeadPair;
use crate::io::{csv_float, RunStamp};
use crate::linalg::{dot, norm, orthonormal_row_basis, remove_span, svd_compact, Matrix};

fn check_labels(labels: &[usize], count: usize, what: &str) -> Result<()> {
    match labels.iter().find(|&&l| l >= count) {
        Some(l) => arg_err(format!("{what} label {l} out of range (< {count})")),
        None => Ok(()),
    }
}

pub fn top1_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return arg_err(format!("{} predictions for {} labels", pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(CfaError::UndefinedMetric("accuracy of an empty set".into()));
    }
    Ok(pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64)
}

/// Unweighted mean of per-class F1 over classes present in `truth`.
pub fn macro_f1(pred: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return arg_err(format!("{} predictions for {} labels", pred.len(), truth.len()));
    }
    check_labels(pred, k, "predicted")?;
    check_labels(truth, k, "true")?;
    if truth.is_empty() {
        return Err(CfaError::UndefinedMetric("F1 of an empty set".into()));
    }
    let (mut tp, mut fp, mut fn_) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..k {
        if tp[c] + fn_[c] == 0 {
            continue;
        }
        present += 1;
        // 2PR/(P+R) simplifies to 2tp / (2tp + fp + fn).
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        if denom > 0 {
            sum += 2.0 * tp[c] as f64 / denom as f64;
        }
    }
    Ok(sum / present as f64)
}

/// `E x K` sample counts per (domain, class) cell.
pub fn cell_counts(truth_y: &[usize], truth_e: &[usize], num_domains: usize, num_classes: usize) -> Result<Matrix> {
    if truth_y.len() != truth_e.len() {
        return arg_err("class and domain label lengths differ");
    }
    check_labels(truth_y, num_classes, "class")?;
    check_labels(truth_e, num_domains, "domain")?;
    let mut m = Matrix::zeros(num_domains, num_classes);
    for (&y, &e) in truth_y.iter().zip(truth_e) {
        m.set(e, y, m.get(e, y) + 1.0);
    }
    Ok(m)
}

/// `E x K` accuracy per cell, `-1` where a cell has no samples.
pub fn per_cell_accuracy(
    pred: &[usize],
    truth_y: &[usize],
    truth_e: &[usize],
    num_domains: usize,
    num_classes: usize,
) -> Result<Matrix> {
    if pred.len() != truth_y.len() {
        return arg_err("prediction and label lengths differ");
    }
    let counts = cell_counts(truth_y, truth_e, num_domains, num_classes)?;
    let mut hits = Matrix::zeros(num_domains, num_classes);
    for ((&p, &y), &e) in pred.iter().zip(truth_y).zip(truth_e) {
        if p == y {
            hits.set(e, y, hits.get(e, y) + 1.0);
        }
    }
    Ok(Matrix::from_fn(num_domains, num_classes, |e, k| {
        let n = counts.get(e, k);
        if n == 0.0 {
            -1.0
        } else {
            hits.get(e, k) / n
        }
    }))
}

/// Minimum over domains (with at least one sample) of the domain's accuracy.
pub fn worst_domain_accuracy(pred: &[usize], truth_y: &[usize], truth_e: &[usize], num_domains: usize) -> Result<f64> {
    if pred.len() != truth_y.len() || pred.len() != truth_e.len() {
        return arg_err("prediction and label lengths differ");
    }
    check_labels(truth_e, num_domains, "domain")?;
    let mut hit = vec![0usize; num_domains];
    let mut n = vec![0usize; num_domains];
    for ((&p, &y), &e) in pred.iter().zip(truth_y).zip(truth_e) {
        n[e] += 1;
        hit[e] += usize::from(p == y);
    }
    (0..num_domains)
        .filter(|&e| n[e] > 0)
        .map(|e| hit[e] as f64 / n[e] as f64)
        .min_by(f64::total_cmp)
        .ok_or_else(|| CfaError::UndefinedMetric("worst-domain accuracy of an empty set".into()))
}

/// Structure of a feature matrix relative to a pair of heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDiagnostics {
    /// Share of `Σ ||z_i||²` in span(W1 rows).
    pub class_energy: f64,
    /// Share in the part of span(W2 rows) orthogonal to span(W1 rows).
    pub domain_energy: f64,
    /// Share in the complement of both.
    pub residual_energy: f64,
    /// Per class: cosine between the class-mean feature projected onto
    /// span(W1) and the class's head row; `None` for classes without samples.
    pub alignment_cosines: Vec<Option<f64>>,
    /// Mean over non-empty (domain, class) cells of the mean squared distance
    /// to the cell mean.
    pub within_cell_variance: f64,
    /// `||W1 W2ᵀ||_F`.
    pub ortho_norm: f64,
}

/// Energy split, head alignment, within-cell spread, and head overlap for
/// features `z` (`N x d`). Energies use nested orthogonal projections so that
/// they sum to one even when the heads overlap.
pub fn feature_diagnostics(z: &Matrix, y: &[usize], e: &[usize], heads: &HeadPair) -> Result<FeatureDiagnostics> {
    let (k, ecount, d) = (heads.num_classes(), heads.num_domains(), heads.dim());
    if z.cols() != d || y.len() != z.rows() || e.len() != z.rows() {
        return arg_err(format!("features {:?} do not match heads (d={d}) and labels", z.shape()));
    }
    check_labels(y, k, "class")?;
    check_labels(e, ecount, "domain")?;
    if z.rows() == 0 {
        return Err(CfaError::UndefinedMetric("diagnostics of an empty set".into()));
    }
    let b1 = orthonormal_row_basis(&heads.w1, 1e-10);
    let b2 = orthonormal_row_basis(&remove_span(&heads.w2, &b1), 1e-10);
    let total = z.frobenius_dot(z);
    if total == 0.0 {
        return Err(CfaError::UndefinedMetric("all features are zero".into()));
    }
    let c1 = z.matmul_t(&b1);
    let c2 = z.matmul_t(&b2);
    let class_energy = c1.frobenius_dot(&c1) / total;
    let domain_energy = c2.frobenius_dot(&c2) / total;
    let residual_energy = (1.0 - class_energy - domain_energy).max(0.0);

    let mut alignment_cosines = Vec::with_capacity(k);
    for c in 0..k {
        let rows: Vec<usize> = (0..z.rows()).filter(|&i| y[i] == c).collect();
        if rows.is_empty() {
            alignment_cosines.push(None);
            continue;
        }
        let mut mean = vec![0.0; d];
        for &i in &rows {
            for (m, v) in mean.iter_mut().zip(z.row(i)) {
                *m += v / rows.len() as f64;
            }
        }
        let proj = b1.t_matvec(&b1.matvec(&mean));
        let w = heads.w1.row(c);
        let denom = norm(&proj) * norm(w);
        alignment_cosines.push(Some(if denom > 0.0 { dot(&proj, w) / denom } else { 0.0 }));
    }

    let mut sums = vec![vec![0.0; d]; ecount * k];
    let mut counts = vec![0usize; ecount * k];
    for i in 0..z.rows() {
        let cell = e[i] * k + y[i];
        counts[cell] += 1;
        for (s, v) in sums[cell].iter_mut().zip(z.row(i)) {
            *s += v;
        }
    }
    let mut spread = vec![0.0; ecount * k];
    for i in 0..z.rows() {
        let cell = e[i] * k + y[i];
        let n = counts[cell] as f64;
        spread[cell] += z.row(i).iter().zip(&sums[cell]).map(|(v, s)| (v - s / n).powi(2)).sum::<f64>();
    }
    let nonempty: Vec<usize> = (0..ecount * k).filter(|&c| counts[c] > 0).collect();
    let within_cell_variance =
        nonempty.iter().map(|&c| spread[c] / counts[c] as f64).sum::<f64>() / nonempty.len() as f64;

    Ok(FeatureDiagnostics {
        class_energy,
        domain_energy,
        residual_energy,
        alignment_cosines,
        within_cell_variance,
        ortho_norm: heads.w1.matmul_t(&heads.w2).frobenius_norm(),
    })
}

/// Accuracy summary for one evaluation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: String,
    pub n: usize,
    pub acc: f64,
    pub f1: f64,
    pub worst_domain_acc: f64,
}

impl SplitMetrics {
    pub fn compute(split: &str, pred: &[usize], y: &[usize], e: &[usize], k: usize, num_domains: usize) -> Result<Self> {
        Ok(Self {
            split: split.into(),
            n: pred.len(),
            acc: top1_accuracy(pred, y)?,
            f1: macro_f1(pred, y, k)?,
            worst_domain_acc: worst_domain_accuracy(pred, y, e, num_domains)?,
        })
    }
}

/// Evaluation of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub id_acc: f64,
    pub ood_acc: f64,
    pub id_f1: f64,
    pub ood_f1: f64,
    /// Worst-domain accuracy on the OOD test split.
    pub worst_domain_ood_acc: f64,
    pub splits: Vec<SplitMetrics>,
    /// `E x K`, over every evaluated sample; `-1` for empty cells.
    pub per_cell_acc: Matrix,
    pub diag: FeatureDiagnostics,
    /// `||W1 W2ᵀ||_F` trace recorded while probing, if any.
    pub ortho_trace: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stamp: Option<RunStamp>,
}

impl MetricsReport {
    pub fn split(&self, name: &str) -> Option<&SplitMetrics> {
        self.splits.iter().find(|s| s.split == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub const VIS_CSV_HEADER: &str = "x,y,class,domain,split";

/// Two-dimensional view of features: each row projected onto span(W1 ∪ W2),
/// then onto the top two principal directions of those projections. Signs
/// are fixed so the largest-magnitude loading of each direction is positive.
pub fn visualization_coords(z: &Matrix, heads: &HeadPair) -> Result<Matrix> {
    if z.cols() != heads.dim() {
        return arg_err("feature dimension does not match the heads");
    }
    let basis = orthonormal_row_basis(&heads.w1.vstack(&heads.w2), 1e-10);
    let mut coords = z.matmul_t(&basis);
    let n = coords.rows();
    if n == 0 {
        return Ok(Matrix::zeros(0, 2));
    }
    let r = coords.cols();
    let mean: Vec<f64> = (0..r).map(|j| (0..n).map(|i| coords.get(i, j)).sum::<f64>() / n as f64).collect();
    for i in 0..n {
        for (v, m) in coords.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let svd = svd_compact(&coords);
    let mut out = Matrix::zeros(n, 2);
    for p in 0..svd.rank().min(2) {
        let mut dir = svd.v.col(p);
        let lead = dir.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            dir.iter_mut().for_each(|v| *v = -*v);
        }
        let proj = coords.matvec(&dir);
        for i in 0..n {
            out.set(i, p, proj[i]);
        }
    }
    Ok(out)
}

/// CSV rows for [`visualization_coords`]; `split` names each row's split.
pub fn visualization_csv(coords: &Matrix, y: &[usize], e: &[usize], split: &[&str], stamp: Option<&RunStamp>) -> Result<String> {
    if coords.cols() != 2 || y.len() != coords.rows() || e.len() != coords.rows() || split.len() != coords.rows() {
        return arg_err("visualization rows and labels disagree");
    }
    let mut s = String::new();
    if let Some(st) = stamp {
        let _ = writeln!(s, "# config_hash={} seed={}", st.config_hash, st.seed);
    }
    s.push_str(VIS_CSV_HEADER);
    s.push('\n');
    for i in 0..coords.rows() {
        let _ = writeln!(s, "{},{},{},{},{}",
            csv_float(coords.get(i, 0)),
            csv_float(coords.get(i, 1)),
            y[i],
            e[i],
            split[i]
        );
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{l2_normalize_rows, RngState};

    #[test]
    fn accuracy_examples() {
        assert_eq!(top1_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(top1_accuracy(&[0, 1, 2, 3], &[0, 1, 2, 0]).unwrap(), 0.75);
        assert!(matches!(top1_accuracy(&[], &[]), Err(CfaError::UndefinedMetric(_))));
    }

    #[test]
    fn f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap(), 1.0);
        let m = macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert!((m - 1.0 / 3.0).abs() < 1e-15);
        // Only classes 1 and 3 occur in the truth: (1 + 0) / 2.
        assert_eq!(macro_f1(&[1, 1, 4], &[1, 1, 3], 5).unwrap(), 0.5);
    }

    #[test]
    fn per_cell_single_sample() {
        let m = per_cell_accuracy(&[2], &[2], &[1], 2, 3).unwrap();
        for e in 0..2 {
            for k in 0..3 {
                assert_eq!(m.get(e, k), if (e, k) == (1, 2) { 1.0 } else { -1.0 });
            }
        }
    }

    #[test]
    fn worst_domain_picks_minimum() {
        let w = worst_domain_accuracy(&[0, 1, 0, 0], &[0, 1, 1, 1], &[0, 0, 1, 1], 3).unwrap();
        assert_eq!(w, 0.0);
    }

    #[test]
    fn head_rows_as_features() {
        let mut rng = RngState::new(0);
        let heads = HeadPair::orthonormal(3, 2, 7, 1.0, 1.0, &mut rng).unwrap();
        let idx = [0, 1, 2, 0, 1, 2];
        let z = heads.w1.select_rows(&idx);
        let diag = feature_diagnostics(&z, &idx, &[0, 0, 0, 1, 1, 1], &heads).unwrap();
        assert!((diag.class_energy - 1.0).abs() < 1e-12);
        assert!(diag.alignment_cosines.iter().all(|c| (c.unwrap() - 1.0).abs() < 1e-12));
        assert!(diag.within_cell_variance < 1e-24);
    }

    #[test]
    fn random_sphere_residual_energy() {
        let mut rng = RngState::new(1);
        let (d, n) = (40, 4000);
        let heads = HeadPair::orthonormal(3, 2, d, 1.0, 1.0, &mut rng).unwrap();
        let z = l2_normalize_rows(&Matrix::from_vec(n, d, rng.normal_vec(n * d)).unwrap(), 1e-12);
        let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let e: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let diag = feature_diagnostics(&z, &y, &e, &heads).unwrap();
        let expect = 1.0 - 5.0 / d as f64;
        assert!((diag.residual_energy - expect).abs() < 0.01, "{}", diag.residual_energy);
        let s = diag.class_energy + diag.domain_energy + diag.residual_energy;
        assert!((s - 1.0).abs() < 1e-10);
    }

    #[test]
    fn visualization_shapes() {
        let mut rng = RngState::new(2);
        let heads = HeadPair::orthonormal(2, 2, 6, 1.0, 1.0, &mut rng).unwrap();
        let z = Matrix::from_vec(5, 6, rng.normal_vec(30)).unwrap();
        let c = visualization_coords(&z, &heads).unwrap();
        assert_eq!(c.shape(), (5, 2));
        let csv = visualization_csv(&c, &[0, 1, 0, 1, 0], &[0, 0, 1, 1, 0], &["train"; 5], None).unwrap();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.starts_with(VIS_CSV_HEADER));
    }
}
