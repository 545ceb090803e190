//! End-to-end runs: data, mask, split, a pretrained starting point, one
//! training method, optional weight interpolation, and evaluation.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{gen_pixel_toy, gen_structured_features, load_dataset, subsample_domain_labels, LabeledDataset, SyntheticSpec};
use crate::encoder::{wise_interpolate, wise_interpolate_encoder, Activation, MlpEncoder};
use crate::error::{arg_err, CfaError, Result};
use crate::heads::{HeadMode, HeadPair};
use crate::io::csv_float;
use crate::linalg::{l2_normalize_rows_in_place, RngState, NORM_EPS};
use crate::metrics::{feature_diagnostics, per_cell_accuracy, MetricsReport, SplitMetrics};
use crate::split::{curate_from_scores, reference_probe_scores, split_dataset, CombinationMask, MaskFile, SplitManifest};
use crate::train::{
    baseline_full_finetune, baseline_lp_ft, finetune, stage1_linear_probe, CheckpointBundle, Reweight, TrainConfig,
};

/// Where the samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Features with an exact class/domain/noise block structure.
    Structured {
        num_classes: usize,
        num_domains: usize,
        d1: usize,
        d2: usize,
        dim: usize,
        sigma: f64,
        noise: f64,
        rotate: bool,
        n_per_cell: usize,
    },
    /// Colored-pattern images.
    Pixel {
        num_classes: usize,
        num_domains: usize,
        side: usize,
        n_per_cell: usize,
        noise: f64,
    },
    /// A saved dataset container.
    File { path: PathBuf },
}

impl DataSource {
    /// `(K, E)` when known without loading anything.
    pub fn shape(&self) -> Option<(usize, usize)> {
        match self {
            Self::Structured {
                num_classes,
                num_domains,
                ..
            }
            | Self::Pixel {
                num_classes,
                num_domains,
                ..
            } => Some((*num_classes, *num_domains)),
            Self::File { .. } => None,
        }
    }

    /// Every cell is generated; the mask decides later what is held out.
    /// Saved datasets are returned as stored.
    pub fn generate(&self, rng: &mut RngState) -> Result<LabeledDataset> {
        let Some((k, e)) = self.shape() else {
            let Self::File { path } = self else { unreachable!() };
            return Ok(load_dataset(path)?.0);
        };
        let all = CombinationMask::all_id(e, k)?;
        match *self {
            Self::Structured {
                num_classes,
                num_domains,
                d1,
                d2,
                dim,
                sigma,
                noise,
                rotate,
                n_per_cell,
            } => {
                let spec = SyntheticSpec::isotropic(num_classes, num_domains, d1, d2, dim, sigma, noise, rotate, rng)?;
                gen_structured_features(&spec, &all, n_per_cell, rng)
            }
            Self::Pixel {
                num_classes,
                num_domains,
                side,
                n_per_cell,
                noise,
            } => gen_pixel_toy(num_classes, num_domains, side, n_per_cell, &all, noise, rng),
            Self::File { .. } => unreachable!(),
        }
    }
}

/// How the held-out cells are chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskSpec {
    /// Class `k` is held out in domain `k mod E`.
    OnePerClass,
    /// Lowest-scoring fraction of cells under nearest class-mean scores.
    Curated { ood_fraction: f64 },
    /// Explicit `E x K` rows, 1 = in distribution.
    Explicit { rows: Vec<Vec<u8>> },
    /// A saved [`MaskFile`].
    File { path: PathBuf },
}

impl MaskSpec {
    pub fn build(&self, ds: &LabeledDataset) -> Result<CombinationMask> {
        let (num_domains, num_classes) = (ds.num_domains(), ds.num_classes());
        let mask = match self {
            Self::OnePerClass => CombinationMask::one_ood_per_class(num_domains, num_classes)?,
            Self::Curated { ood_fraction } => {
                curate_from_scores(&reference_probe_scores(ds)?, *ood_fraction)?.mask
            }
            Self::Explicit { rows } => CombinationMask::from_rows(rows)?,
            Self::File { path } => MaskFile::load(path)?.mask,
        };
        if (mask.num_domains(), mask.num_classes()) != (num_domains, num_classes) {
            return arg_err(format!(
                "mask is {}x{}, data has E={num_domains} K={num_classes}",
                mask.num_domains(),
                mask.num_classes()
            ));
        }
        Ok(mask)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cfa,
    Ft,
    LpFt,
    ReweightE,
    ReweightYxe,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Cfa, Method::Ft, Method::LpFt, Method::ReweightE, Method::ReweightYxe];

    pub fn name(self) -> &'static str {
        match self {
            Method::Cfa => "cfa",
            Method::Ft => "ft",
            Method::LpFt => "lp_ft",
            Method::ReweightE => "reweight_e",
            Method::ReweightYxe => "reweight_yxe",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CfaError::Argument(format!("unknown method {s:?} (expected cfa, ft, lp_ft, reweight_e or reweight_yxe)")))
    }
}

fn default_ratio() -> f64 {
    0.1
}
fn default_one() -> f64 {
    1.0
}
fn default_hidden() -> Vec<usize> {
    vec![64]
}
fn default_feature_dim() -> usize {
    16
}
fn default_pretrain_epochs() -> usize {
    2
}

/// Everything one run needs besides the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub mask: MaskSpec,
    #[serde(default = "default_ratio")]
    pub id_val_ratio: f64,
    /// Fraction of training samples that keep their domain label.
    #[serde(default = "default_one")]
    pub domain_label_ratio: f64,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Epochs of vanilla finetuning that produce the starting encoder.
    #[serde(default = "default_pretrain_epochs")]
    pub pretrain_epochs: usize,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wise_alpha: Option<f64>,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// Every optional field at its default.
    pub fn new(data: DataSource, mask: MaskSpec, method: Method) -> Self {
        Self {
            data,
            mask,
            id_val_ratio: default_ratio(),
            domain_label_ratio: default_one(),
            hidden: default_hidden(),
            feature_dim: default_feature_dim(),
            activation: Activation::default(),
            pretrain_epochs: default_pretrain_epochs(),
            method,
            wise_alpha: None,
            train: TrainConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some((k, e)) = self.data.shape() {
            if self.feature_dim < k + e {
                return arg_err(format!("feature_dim {} is below K+E={}", self.feature_dim, k + e));
            }
        }
        if !(0.0..=1.0).contains(&self.domain_label_ratio) {
            return arg_err(format!("domain_label_ratio must be in [0, 1], got {}", self.domain_label_ratio));
        }
        if let Some(a) = self.wise_alpha {
            if !(0.0..=1.0).contains(&a) {
                return arg_err(format!("wise_alpha must be in [0, 1], got {a}"));
            }
        }
        if self.hidden.contains(&0) {
            return arg_err("hidden layer sizes must be positive");
        }
        Ok(())
    }
}

/// RNG streams forked from the run seed, one per pipeline stage.
pub const DATA_STREAM: u64 = 1;
pub const SPLIT_STREAM: u64 = 3;
pub const LABEL_STREAM: u64 = 4;
pub const PRETRAIN_STREAM: u64 = 5;

/// Data, mask and split shared by every method for one seed.
#[derive(Clone, Debug)]
pub struct PreparedData {
    /// All samples; domain-label presence already subsampled on `train`.
    pub dataset: LabeledDataset,
    pub mask: CombinationMask,
    pub split: SplitManifest,
}

pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    let base = RngState::new(seed);
    let mut ds = cfg.data.generate(&mut base.fork(DATA_STREAM))?;
    let mask = cfg.mask.build(&ds)?;
    let split = split_dataset(&ds, &mask, cfg.id_val_ratio, &mut base.fork(SPLIT_STREAM))?;
    if cfg.domain_label_ratio < 1.0 {
        let train = subsample_domain_labels(&ds.subset(&split.train), cfg.domain_label_ratio, &mut base.fork(LABEL_STREAM))?;
        for (&i, &p) in split.train.iter().zip(&train.domain_label_present) {
            ds.domain_label_present[i] = p;
        }
    }
    Ok(PreparedData {
        dataset: ds,
        mask,
        split,
    })
}

/// Vanilla finetuning from a random encoder and random orthonormal heads.
pub fn pretrain(cfg: &ExperimentConfig, data: &PreparedData, seed: u64) -> Result<CheckpointBundle> {
    let mut rng = RngState::new(seed).fork(PRETRAIN_STREAM);
    let mut dims = vec![data.dataset.input_dim()];
    dims.extend(&cfg.hidden);
    dims.push(cfg.feature_dim);
    let enc = MlpEncoder::new(&dims, cfg.activation, true, &mut rng)?;
    let (k, e) = (data.dataset.num_classes(), data.dataset.num_domains());
    let mut heads = HeadPair::orthonormal(k, e, cfg.feature_dim, cfg.train.beta1, cfg.train.beta2, &mut rng)?;
    if cfg.train.head_mode == HeadMode::UnconstrainedWithBias {
        heads = HeadPair::unconstrained(heads.w1, heads.w2, cfg.train.beta1, cfg.train.beta2)?;
    }
    let pcfg = TrainConfig {
        epochs: cfg.pretrain_epochs,
        freeze_heads: false,
        reweight: Reweight::None,
        lambda: 0.0,
        seed,
        ..cfg.train.clone()
    };
    baseline_full_finetune(&enc, &heads, &data.dataset, &data.split.train, &pcfg)
}

/// Encoder outputs for the rows `idx`, keeping their labels.
pub fn encode_subset(enc: &MlpEncoder, ds: &LabeledDataset, idx: &[usize]) -> Result<LabeledDataset> {
    let sub = ds.subset(idx);
    LabeledDataset::with_presence(
        enc.forward(&sub.inputs)?,
        sub.class_labels,
        sub.domain_labels,
        sub.domain_label_present,
        ds.num_classes(),
        ds.num_domains(),
    )
}

/// Trained model for one method.
#[derive(Clone, Debug)]
pub struct MethodOutcome {
    pub bundle: CheckpointBundle,
    /// Heads the interpolation starts from: the probe heads for CFA and
    /// LP-FT, the starting heads otherwise.
    pub initial_heads: HeadPair,
}

/// Trains `method` from the starting point `theta0`. Baselines always train
/// the heads; CFA honours `train.freeze_heads` for its second stage.
pub fn train_method(
    cfg: &ExperimentConfig,
    method: Method,
    data: &PreparedData,
    theta0: &CheckpointBundle,
    seed: u64,
) -> Result<MethodOutcome> {
    let ds = &data.dataset;
    let train = &data.split.train;
    let tcfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let baseline = |reweight: Reweight| TrainConfig {
        freeze_heads: false,
        reweight,
        ..tcfg.clone()
    };
    match method {
        Method::Cfa => {
            let probe = stage1_linear_probe(&encode_subset(&theta0.encoder, ds, train)?, &tcfg)?;
            let mut bundle = finetune(&theta0.encoder, &probe.heads, ds, train, &tcfg)?;
            bundle.ortho_trace = probe.ortho_trace;
            Ok(MethodOutcome {
                bundle,
                initial_heads: probe.heads,
            })
        }
        Method::Ft | Method::ReweightE | Method::ReweightYxe => {
            let rw = match method {
                Method::ReweightE => Reweight::ByDomain,
                Method::ReweightYxe => Reweight::ByDomainClass,
                _ => Reweight::None,
            };
            let bundle = baseline_full_finetune(&theta0.encoder, &theta0.heads, ds, train, &baseline(rw))?;
            Ok(MethodOutcome {
                bundle,
                initial_heads: theta0.heads.clone(),
            })
        }
        Method::LpFt => {
            let (probe, bundle) = baseline_lp_ft(&theta0.encoder, &theta0.heads, ds, train, &baseline(Reweight::None))?;
            Ok(MethodOutcome {
                bundle,
                initial_heads: probe.heads,
            })
        }
    }
}

/// Weight-space interpolation of encoder and heads between a starting point
/// and a finetuned model. Normalized head rows are renormalized afterwards.
pub fn wise_bundle(
    theta_a: &MlpEncoder,
    heads_a: &HeadPair,
    finetuned: &CheckpointBundle,
    alpha: f64,
) -> Result<CheckpointBundle> {
    let encoder = wise_interpolate_encoder(theta_a, &finetuned.encoder, alpha)?;
    let mut heads = finetuned.heads.clone();
    if heads_a.mode != heads.mode || heads_a.w1.shape() != heads.w1.shape() || heads_a.w2.shape() != heads.w2.shape() {
        return arg_err("heads differ in shape or mode");
    }
    heads.set_flat_params(&wise_interpolate(&heads_a.flat_params(), &finetuned.heads.flat_params(), alpha)?)?;
    if heads.mode == HeadMode::NormalizedNoBias && alpha != 0.0 && alpha != 1.0 {
        l2_normalize_rows_in_place(&mut heads.w1, NORM_EPS);
        l2_normalize_rows_in_place(&mut heads.w2, NORM_EPS);
    }
    Ok(CheckpointBundle {
        encoder,
        heads,
        ..finetuned.clone()
    })
}

/// Accuracy on every non-empty split plus diagnostics on the evaluation splits.
pub fn evaluate(
    bundle: &CheckpointBundle,
    ds: &LabeledDataset,
    split: &SplitManifest,
    method: &str,
) -> Result<MetricsReport> {
    let (k, e) = (ds.num_classes(), ds.num_domains());
    let z = bundle.encoder.forward(&ds.inputs)?;
    let pred = bundle.heads.predict(&z);
    let pick = |idx: &[usize]| -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        (
            idx.iter().map(|&i| pred[i]).collect(),
            idx.iter().map(|&i| ds.class_labels[i]).collect(),
            idx.iter().map(|&i| ds.domain_labels[i]).collect(),
        )
    };
    let mut splits = Vec::new();
    let named: [(&str, &[usize]); 4] = [
        ("train", &split.train),
        ("id_val", &split.id_val),
        ("ood_val", &split.ood_val),
        ("ood_test", &split.ood_test),
    ];
    for (name, idx) in named {
        if idx.is_empty() {
            continue;
        }
        let (p, y, d) = pick(idx);
        splits.push(SplitMetrics::compute(name, &p, &y, &d, k, e)?);
    }
    let mut eval_idx: Vec<usize> = split.eval_splits().iter().flat_map(|(_, idx)| idx.iter().copied()).collect();
    eval_idx.sort_unstable();
    if eval_idx.is_empty() {
        return Err(CfaError::UndefinedMetric("no evaluation samples".into()));
    }
    let (p, y, d) = pick(&eval_idx);
    let per_cell_acc = per_cell_accuracy(&p, &y, &d, e, k)?;
    let diag = feature_diagnostics(&z.select_rows(&eval_idx), &y, &d, &bundle.heads)?;
    let get = |name: &str| splits.iter().find(|s| s.split == name);
    let id = get("id_val");
    let ood = get("ood_test");
    Ok(MetricsReport {
        method: method.into(),
        id_acc: id.map_or(f64::NAN, |s| s.acc),
        ood_acc: ood.map_or(f64::NAN, |s| s.acc),
        id_f1: id.map_or(f64::NAN, |s| s.f1),
        ood_f1: ood.map_or(f64::NAN, |s| s.f1),
        worst_domain_ood_acc: ood.map_or(f64::NAN, |s| s.worst_domain_acc),
        splits,
        per_cell_acc,
        diag,
        ortho_trace: bundle.ortho_trace.clone(),
        stamp: None,
    })
}

/// Artifacts of one seed.
#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub data: PreparedData,
    pub theta0: CheckpointBundle,
    pub model: CheckpointBundle,
    pub report: MetricsReport,
}

/// Full pipeline for one seed and the configured method.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    cfg.validate()?;
    let data = prepare_data(cfg, seed)?;
    let theta0 = pretrain(cfg, &data, seed)?;
    let out = train_method(cfg, cfg.method, &data, &theta0, seed)?;
    let model = match cfg.wise_alpha {
        Some(alpha) => wise_bundle(&theta0.encoder, &out.initial_heads, &out.bundle, alpha)?,
        None => out.bundle,
    };
    let report = evaluate(&model, &data.dataset, &data.split, cfg.method.name())?;
    log::info!(
        "seed {seed} {}: id {:.4} ood {:.4}",
        cfg.method.name(),
        report.id_acc,
        report.ood_acc
    );
    Ok(SeedOutcome {
        seed,
        data,
        theta0,
        model,
        report,
    })
}

/// Runs every seed on up to `threads` workers. Results come back in seed
/// order; a failing seed does not stop the others.
pub fn run_seeds(cfg: &ExperimentConfig, seeds: &[u64], threads: usize) -> Vec<(u64, Result<SeedOutcome>)> {
    let threads = threads.max(1).min(seeds.len().max(1));
    let mut results: Vec<Option<Result<SeedOutcome>>> = (0..seeds.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks: Vec<(usize, &mut [Option<Result<SeedOutcome>>])> = {
            let per = seeds.len().div_ceil(threads).max(1);
            results.chunks_mut(per).enumerate().map(|(c, s)| (c * per, s)).collect()
        };
        for (start, slots) in chunks {
            scope.spawn(move || {
                for (j, slot) in slots.iter_mut().enumerate() {
                    let seed = seeds[start + j];
                    let r = run_seed(cfg, seed);
                    if let Err(err) = &r {
                        log::error!("seed {seed} failed: {err}");
                    }
                    *slot = Some(r);
                }
            });
        }
    });
    seeds
        .iter()
        .copied()
        .zip(results.into_iter().map(|r| r.expect("every slot is filled")))
        .collect()
}

/// Mean metrics over successful seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub seeds: usize,
    pub id_acc: f64,
    pub ood_acc: f64,
    pub id_f1: f64,
    pub ood_f1: f64,
    pub worst_domain_ood_acc: f64,
}

pub fn aggregate(method: &str, reports: &[&MetricsReport]) -> Result<AggregateRow> {
    if reports.is_empty() {
        return Err(CfaError::UndefinedMetric("no successful seeds to aggregate".into()));
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
    Ok(AggregateRow {
        method: method.into(),
        seeds: reports.len(),
        id_acc: mean(|r| r.id_acc),
        ood_acc: mean(|r| r.ood_acc),
        id_f1: mean(|r| r.id_f1),
        ood_f1: mean(|r| r.ood_f1),
        worst_domain_ood_acc: mean(|r| r.worst_domain_ood_acc),
    })
}

pub const AGGREGATE_CSV_HEADER: &str = "method,seeds,id_acc,ood_acc,id_f1,ood_f1,worst_domain_ood_acc";

pub fn aggregate_csv(rows: &[AggregateRow], stamp_line: Option<&str>) -> String {
    let mut s = String::new();
    if let Some(line) = stamp_line {
        let _ = writeln!(s, "# {line}");
    }
    s.push_str(AGGREGATE_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.method,
            r.seeds,
            csv_float(r.id_acc),
            csv_float(r.ood_acc),
            csv_float(r.id_f1),
            csv_float(r.ood_f1),
            csv_float(r.worst_domain_ood_acc)
        );
    }
    s
}
