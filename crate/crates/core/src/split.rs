//! Domain-class combination masks and stratified train/val/test splits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{arg_err, CfaError, Result};
use crate::io::{write_atomic, RunStamp};
use crate::linalg::{Matrix, RngState};

/// `E x K` mask of in-distribution domain-class cells. The OOD mask is always
/// the complement and is never stored.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MaskJson", into = "MaskJson")]
pub struct CombinationMask {
    num_domains: usize,
    num_classes: usize,
    id_cells: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskJson {
    #[serde(rename = "E")]
    e: usize,
    #[serde(rename = "K")]
    k: usize,
    id_cells: Vec<Vec<u8>>,
}

impl TryFrom<MaskJson> for CombinationMask {
    type Error = CfaError;

    fn try_from(j: MaskJson) -> Result<Self> {
        if j.id_cells.len() != j.e {
            return arg_err(format!("id_cells has {} rows, expected E={}", j.id_cells.len(), j.e));
        }
        let mut cells = Vec::with_capacity(j.e * j.k);
        for (r, row) in j.id_cells.iter().enumerate() {
            if row.len() != j.k {
                return arg_err(format!("id_cells row {r} has {} entries, expected K={}", row.len(), j.k));
            }
            for &v in row {
                match v {
                    0 => cells.push(false),
                    1 => cells.push(true),
                    other => return arg_err(format!("id_cells entries must be 0 or 1, got {other}")),
                }
            }
        }
        CombinationMask::from_cells(j.e, j.k, cells)
    }
}

impl From<CombinationMask> for MaskJson {
    fn from(m: CombinationMask) -> Self {
        MaskJson {
            e: m.num_domains,
            k: m.num_classes,
            id_cells: (0..m.num_domains)
                .map(|e| (0..m.num_classes).map(|k| m.is_id(e, k) as u8).collect())
                .collect(),
        }
    }
}

/// On-disk mask with an optional run stamp and the scores it was curated from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskFile {
    pub mask: CombinationMask,
    /// `E x K` curation scores, row-major by domain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub repaired_cells: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stamp: Option<RunStamp>,
}

impl MaskFile {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// One coverage problem found by [`validate_mask`]. Indices are zero-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MaskViolation {
    RowWithoutId(usize),
    ColumnWithoutId(usize),
    RowWithoutOod(usize),
    ColumnWithoutOod(usize),
}

impl std::fmt::Display for MaskViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MaskViolation::RowWithoutId(r) => write!(f, "domain row {r} has no ID cell"),
            MaskViolation::ColumnWithoutId(c) => write!(f, "class column {c} has no ID cell"),
            MaskViolation::RowWithoutOod(r) => write!(f, "domain row {r} has no OOD cell"),
            MaskViolation::ColumnWithoutOod(c) => write!(f, "class column {c} has no OOD cell"),
        }
    }
}

impl CombinationMask {
    /// Row-major `E x K` cells (`true` = ID). Only the shape is checked here;
    /// coverage is checked by [`validate_mask`].
    pub fn from_cells(num_domains: usize, num_classes: usize, id_cells: Vec<bool>) -> Result<Self> {
        if num_domains == 0 || num_classes == 0 {
            return arg_err("mask needs E >= 1 and K >= 1");
        }
        if id_cells.len() != num_domains * num_classes {
            return arg_err(format!(
                "mask has {} cells, expected {}x{}",
                id_cells.len(),
                num_domains,
                num_classes
            ));
        }
        Ok(Self {
            num_domains,
            num_classes,
            id_cells,
        })
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let e = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        MaskJson {
            e,
            k,
            id_cells: rows.to_vec(),
        }
        .try_into()
    }

    pub fn all_id(num_domains: usize, num_classes: usize) -> Result<Self> {
        Self::from_cells(num_domains, num_classes, vec![true; num_domains * num_classes])
    }

    /// Holds out one domain per class: class `k` is OOD in domain `k mod E`.
    pub fn one_ood_per_class(num_domains: usize, num_classes: usize) -> Result<Self> {
        let mut cells = vec![true; num_domains * num_classes];
        for k in 0..num_classes {
            cells[(k % num_domains) * num_classes + k] = false;
        }
        let mask = Self::from_cells(num_domains, num_classes, cells)?;
        validate_mask(&mask, false).map_err(|v| coverage_error(&v))?;
        Ok(mask)
    }

    pub fn num_domains(&self) -> usize {
        self.num_domains
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn is_id(&self, domain: usize, class: usize) -> bool {
        self.id_cells[domain * self.num_classes + class]
    }

    #[inline]
    pub fn is_ood(&self, domain: usize, class: usize) -> bool {
        !self.is_id(domain, class)
    }

    pub fn set_id(&mut self, domain: usize, class: usize, id: bool) {
        self.id_cells[domain * self.num_classes + class] = id;
    }

    pub fn ood_count(&self) -> usize {
        self.id_cells.iter().filter(|&&c| !c).count()
    }

    pub fn ood_cells(&self) -> Vec<(usize, usize)> {
        self.cells().filter(|&(e, k)| self.is_ood(e, k)).collect()
    }

    /// All `(domain, class)` pairs in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_domains).flat_map(move |e| (0..self.num_classes).map(move |k| (e, k)))
    }
}

pub(crate) fn coverage_error(violations: &[MaskViolation]) -> CfaError {
    let parts: Vec<String> = violations.iter().map(ToString::to_string).collect();
    CfaError::Curation(parts.join("; "))
}

/// Lists every row/column without an ID cell and, if `require_ood_per_line`,
/// every row/column without an OOD cell.
pub fn validate_mask(
    mask: &CombinationMask,
    require_ood_per_line: bool,
) -> std::result::Result<(), Vec<MaskViolation>> {
    let (e_count, k_count) = (mask.num_domains, mask.num_classes);
    let mut out = Vec::new();
    for e in 0..e_count {
        let ids = (0..k_count).filter(|&k| mask.is_id(e, k)).count();
        if ids == 0 {
            out.push(MaskViolation::RowWithoutId(e));
        }
        if require_ood_per_line && ids == k_count {
            out.push(MaskViolation::RowWithoutOod(e));
        }
    }
    for k in 0..k_count {
        let ids = (0..e_count).filter(|&e| mask.is_id(e, k)).count();
        if ids == 0 {
            out.push(MaskViolation::ColumnWithoutId(k));
        }
        if require_ood_per_line && ids == e_count {
            out.push(MaskViolation::ColumnWithoutOod(k));
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Per-cell accuracy of a nearest class-mean classifier on raw inputs, a
/// cheap stand-in for a zero-shot score. Class means use every sample; empty
/// cells score 0.
pub fn reference_probe_scores(ds: &LabeledDataset) -> Result<Matrix> {
    let (k_count, e_count, p) = (ds.num_classes(), ds.num_domains(), ds.input_dim());
    if ds.is_empty() {
        return arg_err("cannot score an empty dataset");
    }
    let mut means = Matrix::zeros(k_count, p);
    let mut counts = vec![0usize; k_count];
    for (x, &y) in ds.inputs.row_iter().zip(&ds.class_labels) {
        counts[y] += 1;
        for (m, v) in means.row_mut(y).iter_mut().zip(x) {
            *m += v;
        }
    }
    for (k, &c) in counts.iter().enumerate() {
        if c > 0 {
            means.row_mut(k).iter_mut().for_each(|m| *m /= c as f64);
        }
    }
    let mut hits = Matrix::zeros(e_count, k_count);
    let mut totals = Matrix::zeros(e_count, k_count);
    for (i, x) in ds.inputs.row_iter().enumerate() {
        let pred = (0..k_count)
            .filter(|&k| counts[k] > 0)
            .map(|k| {
                let d2: f64 = x.iter().zip(means.row(k)).map(|(a, b)| (a - b) * (a - b)).sum();
                (k, d2)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map_or(0, |(k, _)| k);
        let (e, y) = (ds.domain_labels[i], ds.class_labels[i]);
        totals.set(e, y, totals.get(e, y) + 1.0);
        if pred == y {
            hits.set(e, y, hits.get(e, y) + 1.0);
        }
    }
    Ok(Matrix::from_fn(e_count, k_count, |e, k| {
        let t = totals.get(e, k);
        if t > 0.0 {
            hits.get(e, k) / t
        } else {
            0.0
        }
    }))
}

/// Result of [`curate_from_scores`]: the mask plus how the repair pass went.
#[derive(Clone, Debug)]
pub struct Curation {
    pub mask: CombinationMask,
    pub ood_before_repair: usize,
    pub repaired_cells: Vec<(usize, usize)>,
}

/// Marks the `floor(ood_fraction * E * K)` lowest-scoring cells OOD, then
/// flips OOD cells back to ID until every row and column has an ID cell.
///
/// Ties in score are broken by `(row, col)` order. Repair prefers cells that
/// fix an uncovered row and an uncovered column at once, then the highest
/// score, which flips `max(#bad rows, #bad columns)` cells, the minimum.
pub fn curate_from_scores(scores: &Matrix, ood_fraction: f64) -> Result<Curation> {
    if !(ood_fraction > 0.0 && ood_fraction < 1.0) {
        return arg_err(format!("ood_fraction must be in (0, 1), got {ood_fraction}"));
    }
    let (e_count, k_count) = scores.shape();
    if e_count == 0 || k_count == 0 {
        return arg_err("score matrix is empty");
    }
    if !scores.is_finite() {
        return arg_err("score matrix contains non-finite values");
    }
    let total = e_count * k_count;
    let n_ood = ((ood_fraction * total as f64) + 1e-9).floor() as usize;

    let mut order: Vec<(usize, usize)> = (0..e_count)
        .flat_map(|e| (0..k_count).map(move |k| (e, k)))
        .collect();
    order.sort_by(|a, b| {
        scores
            .get(a.0, a.1)
            .total_cmp(&scores.get(b.0, b.1))
            .then(a.cmp(b))
    });
    let mut mask = CombinationMask::all_id(e_count, k_count)?;
    for &(e, k) in order.iter().take(n_ood) {
        mask.set_id(e, k, false);
    }

    let mut repaired = Vec::new();
    loop {
        let bad_rows: Vec<bool> = (0..e_count)
            .map(|e| (0..k_count).all(|k| mask.is_ood(e, k)))
            .collect();
        let bad_cols: Vec<bool> = (0..k_count)
            .map(|k| (0..e_count).all(|e| mask.is_ood(e, k)))
            .collect();
        if !bad_rows.iter().any(|&b| b) && !bad_cols.iter().any(|&b| b) {
            break;
        }
        // (fixes, score, Reverse position) maximised.
        let mut best: Option<((usize, usize), usize, f64)> = None;
        for (e, k) in mask.ood_cells() {
            let fixes = bad_rows[e] as usize + bad_cols[k] as usize;
            if fixes == 0 {
                continue;
            }
            let s = scores.get(e, k);
            let better = match best {
                None => true,
                Some((_, bf, bs)) => fixes > bf || (fixes == bf && s > bs),
            };
            if better {
                best = Some(((e, k), fixes, s));
            }
        }
        let ((e, k), _, _) = best.expect("an uncovered line always has an OOD cell");
        mask.set_id(e, k, true);
        repaired.push((e, k));
    }
    debug_assert!(validate_mask(&mask, false).is_ok());
    Ok(Curation {
        mask,
        ood_before_repair: n_ood,
        repaired_cells: repaired,
    })
}

/// Disjoint index lists into a [`LabeledDataset`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub train: Vec<usize>,
    pub id_val: Vec<usize>,
    pub ood_val: Vec<usize>,
    pub ood_test: Vec<usize>,
}

impl SplitManifest {
    pub fn len(&self) -> usize {
        self.train.len() + self.id_val.len() + self.ood_val.len() + self.ood_test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(name, indices)` for the three evaluation splits.
    pub fn eval_splits(&self) -> [(&'static str, &[usize]); 3] {
        [
            ("id_val", &self.id_val),
            ("ood_val", &self.ood_val),
            ("ood_test", &self.ood_test),
        ]
    }
}

/// Stratified split: within each ID cell `floor(n * id_val_ratio)` samples go
/// to `id_val` and the rest (at least one) to `train`; each OOD cell is split
/// `floor(n/2)` to `ood_val`, remainder to `ood_test`.
pub fn split_dataset(
    ds: &LabeledDataset,
    mask: &CombinationMask,
    id_val_ratio: f64,
    rng: &mut RngState,
) -> Result<SplitManifest> {
    if !(id_val_ratio > 0.0 && id_val_ratio < 1.0) {
        return arg_err(format!("id_val_ratio must be in (0, 1), got {id_val_ratio}"));
    }
    if mask.num_domains() != ds.num_domains() || mask.num_classes() != ds.num_classes() {
        return arg_err(format!(
            "mask is {}x{} but dataset has E={} K={}",
            mask.num_domains(),
            mask.num_classes(),
            ds.num_domains(),
            ds.num_classes()
        ));
    }
    let k_count = mask.num_classes();
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); mask.num_domains() * k_count];
    for i in 0..ds.len() {
        cells[ds.domain_labels[i] * k_count + ds.class_labels[i]].push(i);
    }

    let mut manifest = SplitManifest::default();
    for (cell, members) in cells.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        rng.shuffle(members);
        let (e, k) = (cell / k_count, cell % k_count);
        let n = members.len();
        if mask.is_id(e, k) {
            let n_val = ((n as f64 * id_val_ratio) + 1e-9).floor() as usize;
            let n_val = n_val.min(n - 1);
            manifest.id_val.extend_from_slice(&members[..n_val]);
            manifest.train.extend_from_slice(&members[n_val..]);
        } else {
            let n_val = n / 2;
            manifest.ood_val.extend_from_slice(&members[..n_val]);
            manifest.ood_test.extend_from_slice(&members[n_val..]);
        }
    }
    for list in [
        &mut manifest.train,
        &mut manifest.id_val,
        &mut manifest.ood_val,
        &mut manifest.ood_test,
    ] {
        list.sort_unstable();
    }

    let mut class_seen = vec![false; ds.num_classes()];
    let mut domain_seen = vec![false; ds.num_domains()];
    for &i in &manifest.train {
        class_seen[ds.class_labels[i]] = true;
        domain_seen[ds.domain_labels[i]] = true;
    }
    let missing_classes: Vec<usize> = (0..class_seen.len()).filter(|&k| !class_seen[k]).collect();
    let missing_domains: Vec<usize> = (0..domain_seen.len()).filter(|&e| !domain_seen[e]).collect();
    if !missing_classes.is_empty() || !missing_domains.is_empty() {
        return Err(CfaError::Curation(format!(
            "training split lacks classes {missing_classes:?} and domains {missing_domains:?}"
        )));
    }
    Ok(manifest)
}
