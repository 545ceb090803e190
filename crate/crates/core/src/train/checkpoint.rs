use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::TrainConfig;
use crate::encoder::{Activation, MlpEncoder};
use crate::error::{CfaError, Result};
use crate::heads::{HeadMode, HeadPair};
use crate::io::{self, csv_float, PayloadReader, RunStamp};
use crate::linalg::Matrix;

const CHECKPOINT_MAGIC: &[u8; 4] = b"CFA1";

/// One row of the training trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss_class: f64,
    pub loss_domain: f64,
    pub loss_ortho: f64,
    pub acc: f64,
}

/// Encoder, heads, the configuration that produced them, and the training trace.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointBundle {
    pub encoder: MlpEncoder,
    pub heads: HeadPair,
    pub config: TrainConfig,
    pub trace: Vec<EpochMetrics>,
    /// `||W1 W2ᵀ||_F` trace from probing, when the run included one.
    pub ortho_trace: Vec<f64>,
    pub stamp: Option<RunStamp>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorSpec {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderMeta {
    layer_dims: Vec<usize>,
    activation: Activation,
    output_normalize: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadMeta {
    beta1: f64,
    beta2: f64,
    mode: HeadMode,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    tensors: Vec<TensorSpec>,
    encoder: EncoderMeta,
    heads: HeadMeta,
    config: TrainConfig,
    trace: Vec<EpochMetrics>,
    ortho_trace: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stamp: Option<RunStamp>,
}

fn tensor(name: String, shape: Vec<usize>) -> TensorSpec {
    TensorSpec {
        name,
        shape,
        dtype: "f64le".into(),
    }
}

fn tensor_specs(enc: &MlpEncoder, heads: &HeadPair) -> Vec<TensorSpec> {
    let mut out = Vec::new();
    for (l, (w, b)) in enc.weights.iter().zip(&enc.biases).enumerate() {
        out.push(tensor(format!("encoder.{l}.weight"), vec![w.rows(), w.cols()]));
        out.push(tensor(format!("encoder.{l}.bias"), vec![b.len()]));
    }
    out.push(tensor("heads.w1".into(), vec![heads.w1.rows(), heads.w1.cols()]));
    out.push(tensor("heads.w2".into(), vec![heads.w2.rows(), heads.w2.cols()]));
    out.push(tensor("heads.b1".into(), vec![heads.b1.len()]));
    out.push(tensor("heads.b2".into(), vec![heads.b2.len()]));
    out
}

impl CheckpointBundle {
    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.trace.iter().any(|m| {
            ![m.loss_class, m.loss_domain, m.loss_ortho, m.acc]
                .iter()
                .all(|v| v.is_finite())
        }) || self.ortho_trace.iter().any(|v| !v.is_finite())
        {
            return Err(CfaError::Format("trace contains non-finite values".into()));
        }
        let header = CheckpointHeader {
            tensors: tensor_specs(&self.encoder, &self.heads),
            encoder: EncoderMeta {
                layer_dims: self.encoder.layer_dims.clone(),
                activation: self.encoder.activation,
                output_normalize: self.encoder.output_normalize,
            },
            heads: HeadMeta {
                beta1: self.heads.beta1,
                beta2: self.heads.beta2,
                mode: self.heads.mode,
            },
            config: self.config.clone(),
            trace: self.trace.clone(),
            ortho_trace: self.ortho_trace.clone(),
            stamp: self.stamp.clone(),
        };
        let mut payload = Vec::new();
        for (w, b) in self.encoder.weights.iter().zip(&self.encoder.biases) {
            io::push_f64s(&mut payload, w.data());
            io::push_f64s(&mut payload, b);
        }
        io::push_f64s(&mut payload, self.heads.w1.data());
        io::push_f64s(&mut payload, self.heads.w2.data());
        io::push_f64s(&mut payload, &self.heads.b1);
        io::push_f64s(&mut payload, &self.heads.b2);
        io::encode_container(CHECKPOINT_MAGIC, &json!(header), &payload)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = io::decode_container(CHECKPOINT_MAGIC, bytes)?;
        let h: CheckpointHeader = serde_json::from_value(header)?;
        let dims = &h.encoder.layer_dims;
        if dims.len() < 2 {
            return Err(CfaError::Format("encoder needs at least two layer sizes".into()));
        }
        let mut r = PayloadReader::new(payload);
        let mut tensors = h.tensors.iter();
        let mut next = |expect: &[usize]| -> Result<Vec<f64>> {
            let spec = tensors
                .next()
                .ok_or_else(|| CfaError::Format("missing tensor entry".into()))?;
            if spec.shape != expect || spec.dtype != "f64le" {
                return Err(CfaError::Format(format!(
                    "tensor {} has shape {:?}/{}, expected {:?}/f64le",
                    spec.name, spec.shape, spec.dtype, expect
                )));
            }
            r.f64s(expect.iter().product())
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            weights.push(Matrix::from_vec(w[1], w[0], next(&[w[1], w[0]])?)?);
            biases.push(next(&[w[1]])?);
        }
        let (k, e) = (
            h.tensors.get(2 * weights.len()).map(|t| t.shape.first().copied().unwrap_or(0)).unwrap_or(0),
            h.tensors.get(2 * weights.len() + 1).map(|t| t.shape.first().copied().unwrap_or(0)).unwrap_or(0),
        );
        let d = *dims.last().expect("checked length");
        let w1 = Matrix::from_vec(k, d, next(&[k, d])?)?;
        let w2 = Matrix::from_vec(e, d, next(&[e, d])?)?;
        let nb = if h.heads.mode == HeadMode::UnconstrainedWithBias { (k, e) } else { (0, 0) };
        let b1 = next(&[nb.0])?;
        let b2 = next(&[nb.1])?;
        r.finish()?;
        if tensors.next().is_some() {
            return Err(CfaError::Format("unexpected extra tensors".into()));
        }
        Ok(Self {
            encoder: MlpEncoder {
                layer_dims: dims.clone(),
                weights,
                biases,
                activation: h.encoder.activation,
                output_normalize: h.encoder.output_normalize,
            },
            heads: HeadPair {
                w1,
                w2,
                beta1: h.heads.beta1,
                beta2: h.heads.beta2,
                mode: h.heads.mode,
                b1,
                b2,
            },
            config: h.config,
            trace: h.trace,
            ortho_trace: h.ortho_trace,
            stamp: h.stamp,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

pub const METRICS_CSV_HEADER: &str = "epoch,split,loss_class,loss_domain,loss_ortho,acc";

/// Renders trace rows as CSV, preceded by a `# config_hash=... seed=...` line
/// when a stamp is given.
pub fn metrics_csv(rows: &[EpochMetrics], stamp: Option<&RunStamp>) -> String {
    let mut s = String::new();
    if let Some(st) = stamp {
        let _ = writeln!(s, "# config_hash={} seed={}", st.config_hash, st.seed);
    }
    s.push_str(METRICS_CSV_HEADER);
    s.push('\n');
    for m in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            m.epoch,
            m.split,
            csv_float(m.loss_class),
            csv_float(m.loss_domain),
            csv_float(m.loss_ortho),
            csv_float(m.acc)
        );
    }
    s
}
