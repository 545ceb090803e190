//! Labeled datasets, synthetic generators and the `CFD1` dataset container.

mod pixel;
mod synth;

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{arg_err, CfaError, Result};
use crate::io::{self, PayloadReader, RunStamp};
use crate::linalg::{Matrix, RngState};

pub use pixel::{gen_pixel_toy, pixel_palette, MAX_PIXEL_DOMAINS, NUM_PATTERNS};
pub use synth::{gen_structured_features, simplex_vertices, SyntheticSpec};

const DATASET_MAGIC: &[u8; 4] = b"CFD1";

/// Inputs with class labels, domain labels and domain-label-present flags.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Matrix,
    pub class_labels: Vec<usize>,
    pub domain_labels: Vec<usize>,
    pub domain_label_present: Vec<bool>,
    num_classes: usize,
    num_domains: usize,
}

impl LabeledDataset {
    /// All domain labels are marked present.
    pub fn new(
        inputs: Matrix,
        class_labels: Vec<usize>,
        domain_labels: Vec<usize>,
        num_classes: usize,
        num_domains: usize,
    ) -> Result<Self> {
        let present = vec![true; class_labels.len()];
        Self::with_presence(inputs, class_labels, domain_labels, present, num_classes, num_domains)
    }

    pub fn with_presence(
        inputs: Matrix,
        class_labels: Vec<usize>,
        domain_labels: Vec<usize>,
        domain_label_present: Vec<bool>,
        num_classes: usize,
        num_domains: usize,
    ) -> Result<Self> {
        let n = inputs.rows();
        if class_labels.len() != n || domain_labels.len() != n || domain_label_present.len() != n {
            return arg_err(format!(
                "label arrays ({}, {}, {}) must match {n} input rows",
                class_labels.len(),
                domain_labels.len(),
                domain_label_present.len()
            ));
        }
        if num_classes == 0 || num_domains == 0 {
            return arg_err("need K >= 1 and E >= 1");
        }
        if let Some(&y) = class_labels.iter().find(|&&y| y >= num_classes) {
            return arg_err(format!("class label {y} out of range for K={num_classes}"));
        }
        if let Some(&e) = domain_labels.iter().find(|&&e| e >= num_domains) {
            return arg_err(format!("domain label {e} out of range for E={num_domains}"));
        }
        if !inputs.is_finite() {
            return arg_err("inputs contain non-finite values");
        }
        Ok(Self {
            inputs,
            class_labels,
            domain_labels,
            domain_label_present,
            num_classes,
            num_domains,
        })
    }

    pub fn len(&self) -> usize {
        self.class_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_domains(&self) -> usize {
        self.num_domains
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows `indices` in the given order, keeping `K` and `E`.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            inputs: self.inputs.select_rows(indices),
            class_labels: indices.iter().map(|&i| self.class_labels[i]).collect(),
            domain_labels: indices.iter().map(|&i| self.domain_labels[i]).collect(),
            domain_label_present: indices.iter().map(|&i| self.domain_label_present[i]).collect(),
            num_classes: self.num_classes,
            num_domains: self.num_domains,
        }
    }

    /// Sample counts per `(domain, class)` cell, row-major `E x K`.
    pub fn cell_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_domains * self.num_classes];
        for (&e, &y) in self.domain_labels.iter().zip(&self.class_labels) {
            counts[e * self.num_classes + y] += 1;
        }
        counts
    }
}

/// Keeps domain labels for `ceil(ratio * N)` uniformly chosen samples.
///
/// When `ratio > 0`, every domain keeps at least one labeled sample. Missing
/// domains are repaired by swapping a label away from a domain that has more
/// than one, so the total stays exact whenever `ceil(ratio * N) >= E`.
pub fn subsample_domain_labels(ds: &LabeledDataset, ratio: f64, rng: &mut RngState) -> Result<LabeledDataset> {
    if !(0.0..=1.0).contains(&ratio) {
        return arg_err(format!("ratio must be in [0, 1], got {ratio}"));
    }
    let n = ds.len();
    let keep = ((ratio * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let keep = keep.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut present = vec![false; n];
    for &i in &order[..keep] {
        present[i] = true;
    }

    if ratio > 0.0 {
        let mut per_domain = vec![0usize; ds.num_domains];
        for i in (0..n).filter(|&i| present[i]) {
            per_domain[ds.domain_labels[i]] += 1;
        }
        for e in 0..ds.num_domains {
            if per_domain[e] > 0 {
                continue;
            }
            let candidates: Vec<usize> = (0..n).filter(|&i| ds.domain_labels[i] == e).collect();
            if candidates.is_empty() {
                continue;
            }
            let pick = candidates[rng.below(candidates.len())];
            present[pick] = true;
            per_domain[e] += 1;
            // Give back one label from a well-covered domain, in shuffled order.
            if let Some(&drop) = order[..keep]
                .iter()
                .find(|&&i| present[i] && per_domain[ds.domain_labels[i]] > 1)
            {
                present[drop] = false;
                per_domain[ds.domain_labels[drop]] -= 1;
            }
        }
    }

    let mut out = ds.clone();
    out.domain_label_present = present;
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    #[serde(rename = "N")]
    n: usize,
    p: usize,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "E")]
    e: usize,
    fields: Vec<FieldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stamp: Option<RunStamp>,
}

#[derive(Serialize, Deserialize, PartialEq, Debug)]
#[serde(deny_unknown_fields)]
struct FieldSpec {
    name: String,
    dtype: String,
}

fn dataset_fields() -> Vec<FieldSpec> {
    [
        ("inputs", "f64le"),
        ("class_labels", "i32le"),
        ("domain_labels", "i32le"),
        ("domain_label_present", "i32le"),
    ]
    .into_iter()
    .map(|(name, dtype)| FieldSpec {
        name: name.into(),
        dtype: dtype.into(),
    })
    .collect()
}

fn label_to_i32(v: usize) -> Result<i32> {
    i32::try_from(v).map_err(|_| CfaError::Format(format!("label {v} exceeds i32")))
}

/// Serializes to the `CFD1` container.
pub fn encode_dataset(ds: &LabeledDataset, stamp: Option<&RunStamp>) -> Result<Vec<u8>> {
    let header = DatasetHeader {
        n: ds.len(),
        p: ds.input_dim(),
        k: ds.num_classes,
        e: ds.num_domains,
        fields: dataset_fields(),
        stamp: stamp.cloned(),
    };
    let mut payload = Vec::with_capacity(ds.len() * (ds.input_dim() * 8 + 12));
    io::push_f64s(&mut payload, ds.inputs.data());
    let ys = ds.class_labels.iter().map(|&v| label_to_i32(v)).collect::<Result<Vec<_>>>()?;
    let es = ds.domain_labels.iter().map(|&v| label_to_i32(v)).collect::<Result<Vec<_>>>()?;
    io::push_i32s(&mut payload, ys);
    io::push_i32s(&mut payload, es);
    io::push_i32s(&mut payload, ds.domain_label_present.iter().map(|&b| b as i32));
    io::encode_container(DATASET_MAGIC, &json!(header), &payload)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<(LabeledDataset, Option<RunStamp>)> {
    let (header, payload) = io::decode_container(DATASET_MAGIC, bytes)?;
    let h: DatasetHeader = serde_json::from_value(header)?;
    if h.fields != dataset_fields() {
        return Err(CfaError::Format("unexpected dataset field layout".into()));
    }
    let mut r = PayloadReader::new(payload);
    let inputs = Matrix::from_vec(h.n, h.p, r.f64s(h.n * h.p)?)?;
    let to_labels = |v: Vec<i32>| -> Result<Vec<usize>> {
        v.into_iter()
            .map(|x| usize::try_from(x).map_err(|_| CfaError::Format(format!("negative label {x}"))))
            .collect()
    };
    let ys = to_labels(r.i32s(h.n)?)?;
    let es = to_labels(r.i32s(h.n)?)?;
    let present = r
        .i32s(h.n)?
        .into_iter()
        .map(|v| match v {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(CfaError::Format(format!("presence flag {other} is not 0/1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let ds = LabeledDataset::with_presence(inputs, ys, es, present, h.k, h.e)
        .map_err(|e| CfaError::Format(e.to_string()))?;
    Ok((ds, h.stamp))
}

pub fn save_dataset(path: &Path, ds: &LabeledDataset, stamp: Option<&RunStamp>) -> Result<()> {
    io::write_atomic(path, &encode_dataset(ds, stamp)?)
}

pub fn load_dataset(path: &Path) -> Result<(LabeledDataset, Option<RunStamp>)> {
    decode_dataset(&std::fs::read(path)?)
}
