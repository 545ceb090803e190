use super::checkpoint::{CheckpointBundle, EpochMetrics};
use super::optim::{adamw_cosine_step, AdamState};
use super::probe::probe_class_head;
use super::sampler::make_sampler;
use super::TrainConfig;
use crate::data::LabeledDataset;
use crate::encoder::MlpEncoder;
use crate::error::{arg_err, CfaError, Result};
use crate::heads::{argmax, cfa_loss, ortho_penalty, HeadMode, HeadPair};
use crate::linalg::{l2_normalize_rows_in_place, NORM_EPS};

/// Shared minibatch loop: AdamW + cosine over `epochs * batches` steps on the
/// encoder and, when `train_heads`, on the heads too (renormalized after each
/// step in normalized mode).
fn run_finetune(
    enc: &MlpEncoder,
    heads: &HeadPair,
    ds: &LabeledDataset,
    train_idx: &[usize],
    cfg: &TrainConfig,
    lambda: f64,
    train_heads: bool,
) -> Result<CheckpointBundle> {
    cfg.validate()?;
    if enc.input_dim() != ds.input_dim() {
        return arg_err(format!(
            "encoder expects {} inputs, dataset has {}",
            enc.input_dim(),
            ds.input_dim()
        ));
    }
    if enc.output_dim() != heads.dim() {
        return arg_err(format!("encoder emits {} features, heads expect {}", enc.output_dim(), heads.dim()));
    }
    if heads.num_classes() != ds.num_classes() || heads.num_domains() != ds.num_domains() {
        return arg_err("head sizes do not match the dataset label counts");
    }
    let mut enc = enc.clone();
    let mut heads = heads.clone();
    let mut bundle_trace = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok(CheckpointBundle {
            encoder: enc,
            heads,
            config: cfg.clone(),
            trace: bundle_trace,
            ortho_trace: Vec::new(),
            stamp: None,
        });
    }

    let sampler = make_sampler(ds, train_idx, cfg.reweight)?;
    let mut rng = crate::linalg::RngState::new(cfg.seed).fork(20);
    let per_epoch = sampler.batches_per_epoch(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let n_enc = enc.num_params();
    let n_head = if train_heads { heads.flat_params().len() } else { 0 };
    let mut adam = AdamState::new(n_enc + n_head);
    let mut params = Vec::with_capacity(n_enc + n_head);
    let mut grads = Vec::with_capacity(n_enc + n_head);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let (mut sum_c, mut sum_d, mut correct, mut seen, mut batches) = (0.0, 0.0, 0usize, 0usize, 0usize);
        for batch in sampler.epoch_batches(&mut rng, cfg.batch_size) {
            let sub = ds.subset(&batch);
            let cache = enc.forward_cached(&sub.inputs)?;
            let out = cfa_loss(
                &heads,
                &cache.output,
                &sub.class_labels,
                &sub.domain_labels,
                &sub.domain_label_present,
                lambda,
            )?;
            if !out.loss.is_finite() {
                return Err(CfaError::NonConvergence {
                    what: format!("finetuning at epoch {epoch}"),
                    trace: bundle_trace.iter().map(|m: &EpochMetrics| m.loss_class).collect(),
                });
            }
            sum_c += out.class_term;
            sum_d += out.domain_term;
            batches += 1;
            for (i, row) in cache.output.row_iter().enumerate() {
                correct += usize::from(argmax(&heads.class_logits(row)) == sub.class_labels[i]);
            }
            seen += batch.len();

            let enc_grad = enc.backward(&cache, &out.grad_z)?;
            params.clear();
            params.extend(enc.flat_params());
            grads.clear();
            grads.extend_from_slice(&enc_grad);
            if train_heads {
                params.extend(heads.flat_params());
                grads.extend_from_slice(out.grad_w1.data());
                grads.extend_from_slice(out.grad_w2.data());
                grads.extend_from_slice(&out.grad_b1);
                grads.extend_from_slice(&out.grad_b2);
            }
            adamw_cosine_step(&mut adam, &mut params, &grads, step, total, cfg.lr, cfg.weight_decay)?;
            step += 1;
            enc.set_flat_params(&params[..n_enc])?;
            if train_heads {
                heads.set_flat_params(&params[n_enc..])?;
                if heads.mode == HeadMode::NormalizedNoBias {
                    l2_normalize_rows_in_place(&mut heads.w1, NORM_EPS);
                    l2_normalize_rows_in_place(&mut heads.w2, NORM_EPS);
                }
            }
        }
        let (ortho, _) = ortho_penalty(&heads.w1, &heads.w2)?;
        bundle_trace.push(EpochMetrics {
            epoch,
            split: "train".into(),
            loss_class: sum_c / batches as f64,
            loss_domain: sum_d / batches as f64,
            loss_ortho: ortho,
            acc: correct as f64 / seen as f64,
        });
        log::debug!(
            "epoch {epoch}: class loss {:.4e}, acc {:.4}",
            sum_c / batches as f64,
            correct as f64 / seen as f64
        );
    }
    Ok(CheckpointBundle {
        encoder: enc,
        heads,
        config: cfg.clone(),
        trace: bundle_trace,
        ortho_trace: Vec::new(),
        stamp: None,
    })
}

/// Second CFA stage: finetunes the encoder end to end against frozen heads on
/// the two-term loss with coefficient `cfg.lambda`.
pub fn stage2_finetune(
    enc: &MlpEncoder,
    heads: &HeadPair,
    ds: &LabeledDataset,
    train_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<CheckpointBundle> {
    if !cfg.freeze_heads {
        return arg_err("stage-2 finetuning requires freeze_heads = true");
    }
    run_finetune(enc, heads, ds, train_idx, cfg, cfg.lambda, false)
}

/// Finetuning with the heads either frozen or trained jointly, on the same
/// two-term loss. With `freeze_heads = true` this is [`stage2_finetune`].
pub fn finetune(
    enc: &MlpEncoder,
    heads: &HeadPair,
    ds: &LabeledDataset,
    train_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<CheckpointBundle> {
    run_finetune(enc, heads, ds, train_idx, cfg, cfg.lambda, !cfg.freeze_heads)
}

/// Full finetuning of encoder and class head on the class loss alone. The
/// sampler follows `cfg.reweight`, which also covers the reweighting baselines.
pub fn baseline_full_finetune(
    enc: &MlpEncoder,
    heads: &HeadPair,
    ds: &LabeledDataset,
    train_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<CheckpointBundle> {
    if cfg.freeze_heads {
        return arg_err("full finetuning requires freeze_heads = false");
    }
    run_finetune(enc, heads, ds, train_idx, cfg, 0.0, true)
}

/// LP-FT: a cell-balanced class probe on frozen features, then full finetuning
/// from the probed head. Returns `(probe_only, finetuned)`.
pub fn baseline_lp_ft(
    enc: &MlpEncoder,
    heads: &HeadPair,
    ds: &LabeledDataset,
    train_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<(CheckpointBundle, CheckpointBundle)> {
    let feats = ds.subset(train_idx);
    let z = enc.forward(&feats.inputs)?;
    let feats = LabeledDataset::with_presence(
        z,
        feats.class_labels,
        feats.domain_labels,
        feats.domain_label_present,
        ds.num_classes(),
        ds.num_domains(),
    )?;
    let (probed, probe_trace) = probe_class_head(&feats, heads, cfg)?;
    log::info!("lp-ft: probe finished (class loss {:.4e}); starting finetuning", probe_trace.last().copied().unwrap_or(f64::NAN));
    let probe_only = CheckpointBundle {
        encoder: enc.clone(),
        heads: probed.clone(),
        config: cfg.clone(),
        trace: vec![EpochMetrics {
            epoch: 0,
            split: "probe".into(),
            loss_class: probe_trace.last().copied().unwrap_or(0.0),
            loss_domain: 0.0,
            loss_ortho: ortho_penalty(&probed.w1, &probed.w2)?.0,
            acc: {
                let pred = probed.predict(&crate::linalg::l2_normalize_rows(&feats.inputs, NORM_EPS));
                pred.iter().zip(&feats.class_labels).filter(|(p, t)| p == t).count() as f64 / feats.len().max(1) as f64
            },
        }],
        ortho_trace: Vec::new(),
        stamp: None,
    };
    let finetuned = baseline_full_finetune(enc, &probed, ds, train_idx, cfg)?;
    Ok((probe_only, finetuned))
}
