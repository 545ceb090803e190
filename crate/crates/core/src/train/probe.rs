//! Linear probing on frozen features: the two-step orthogonal probe and the
//! class-only probe used before LP-FT.

use super::optim::{adamw_cosine_step, AdamState};
use super::sampler::make_sampler;
use super::{Reweight, TrainConfig};
use crate::data::LabeledDataset;
use crate::error::{arg_err, CfaError, Result};
use crate::heads::{head_ce, ortho_penalty, retract_heads_repair, HeadMode, HeadPair, OrthoMode};
use crate::linalg::{l2_normalize_rows, orthonormal_row_basis, remove_span, Matrix, RngState, NORM_EPS};

/// Output of [`stage1_linear_probe`].
#[derive(Clone, Debug)]
pub struct ProbeReport {
    pub heads: HeadPair,
    /// Domain loss per iteration of step (i), starting with the initial value.
    pub domain_trace: Vec<f64>,
    /// Class loss (without the penalty) per iteration of step (ii).
    pub class_trace: Vec<f64>,
    /// `||W1 W2ᵀ||_F` per iteration of step (ii), before the final cleanup.
    pub ortho_trace: Vec<f64>,
    /// Training accuracy of the domain head after step (i), over labeled samples.
    pub domain_train_acc: f64,
}

/// Normalized mean of the rows carrying each label; labels with no rows get a
/// random unit vector.
fn label_means(z: &Matrix, labels: &[usize], mask: &[bool], count: usize, rng: &mut RngState) -> Matrix {
    let d = z.cols();
    let mut m = Matrix::zeros(count, d);
    let mut seen = vec![false; count];
    for i in 0..z.rows() {
        if !mask[i] {
            continue;
        }
        seen[labels[i]] = true;
        for (o, v) in m.row_mut(labels[i]).iter_mut().zip(z.row(i)) {
            *o += v;
        }
    }
    for (c, &s) in seen.iter().enumerate() {
        if !s || crate::linalg::norm(m.row(c)) < NORM_EPS {
            m.row_mut(c).copy_from_slice(&rng.normal_vec(d));
        }
    }
    l2_normalize_rows(&m, NORM_EPS)
}

fn retract(heads: &HeadPair, ortho: OrthoMode, rng: &mut RngState) -> Result<HeadPair> {
    match heads.mode {
        HeadMode::NormalizedNoBias => retract_heads_repair(heads, ortho, rng),
        HeadMode::UnconstrainedWithBias => {
            let mut out = heads.clone();
            if ortho == OrthoMode::Projection {
                out.w1 = remove_span(&out.w1, &orthonormal_row_basis(&out.w2, 1e-10));
            }
            Ok(out)
        }
    }
}

/// Sampler mass as dense per-sample weights over `0..n`.
fn dense_weights(ds: &LabeledDataset, indices: &[usize], mode: Reweight) -> Result<Vec<f64>> {
    let mut w = vec![0.0; ds.len()];
    if indices.is_empty() {
        return Ok(w);
    }
    for (i, wi) in make_sampler(ds, indices, mode)?.importance_weights() {
        w[i] = wi;
    }
    Ok(w)
}

fn ortho_norm(h: &HeadPair) -> f64 {
    h.w1.matmul_t(&h.w2).frobenius_norm()
}

/// Two-step orthogonal probe on frozen features.
///
/// Step (i) fits `W2` to the domain labels with domain-balanced weights while
/// `W1` stays at its initialization (normalized class means). Step (ii) fits
/// `W1` to the class labels with cell-balanced weights plus
/// `lambda_ortho * ||W1 W2ᵀ||²` while `W2` stays fixed. Each step runs
/// `stage1_iters` full-batch AdamW iterations; the weighted full batch equals
/// the expected loss under the corresponding resampling scheme, which keeps
/// the traces deterministic. Rows of `features` are L2-normalized first.
pub fn stage1_linear_probe(features: &LabeledDataset, cfg: &TrainConfig) -> Result<ProbeReport> {
    cfg.validate()?;
    let (k, e, d) = (features.num_classes(), features.num_domains(), features.input_dim());
    if d < k + e {
        return arg_err(format!("feature dimension {d} is below K+E={}", k + e));
    }
    if features.is_empty() {
        return arg_err("probe needs at least one sample");
    }
    let base = RngState::new(cfg.seed);
    let mut init_rng = base.fork(10);
    let mut repair_rng = base.fork(11);
    let z = l2_normalize_rows(&features.inputs, NORM_EPS);
    let y = &features.class_labels;
    let dom = &features.domain_labels;
    let present = &features.domain_label_present;
    let all: Vec<usize> = (0..features.len()).collect();
    let labeled: Vec<usize> = all.iter().copied().filter(|&i| present[i]).collect();
    if labeled.is_empty() {
        return Err(CfaError::Curation("no sample carries a domain label".into()));
    }

    let w1 = label_means(&z, y, &vec![true; z.rows()], k, &mut init_rng);
    let w2 = label_means(&z, dom, present, e, &mut init_rng);
    let mut heads = match cfg.head_mode {
        HeadMode::NormalizedNoBias => HeadPair::normalized(w1, w2, cfg.beta1, cfg.beta2)?,
        HeadMode::UnconstrainedWithBias => HeadPair::unconstrained(w1, w2, cfg.beta1, cfg.beta2)?,
    };
    let iters = cfg.stage1_iters;

    // Step (i): domain head.
    let dw = dense_weights(features, &labeled, Reweight::ByDomain)?;
    let e_scale = 1.0 / e as f64;
    let mut adam = AdamState::new(heads.w2.data().len() + heads.b2.len());
    let mut domain_trace = Vec::with_capacity(iters + 1);
    for t in 0..=iters {
        let (loss, gw, gb) = head_ce(&heads.w2, &heads.b2, heads.beta2, &z, dom, &dw);
        domain_trace.push(e_scale * loss);
        if !loss.is_finite() {
            return Err(CfaError::NonConvergence {
                what: "stage-1 domain probe".into(),
                trace: domain_trace,
            });
        }
        if t == iters {
            break;
        }
        let mut params = heads.w2.data().to_vec();
        params.extend_from_slice(&heads.b2);
        let mut grads: Vec<f64> = gw.data().iter().map(|g| g * e_scale).collect();
        grads.extend(gb.iter().map(|g| g * e_scale));
        adamw_cosine_step(&mut adam, &mut params, &grads, t, iters, cfg.stage1_lr, cfg.weight_decay)?;
        let nw = heads.w2.data().len();
        heads.w2.data_mut().copy_from_slice(&params[..nw]);
        heads.b2.copy_from_slice(&params[nw..]);
        if heads.mode == HeadMode::NormalizedNoBias {
            crate::linalg::l2_normalize_rows_in_place(&mut heads.w2, NORM_EPS);
        }
    }
    let first = domain_trace[0];
    let last = *domain_trace.last().expect("trace has the initial value");
    if iters > 0 && last > first {
        return Err(CfaError::NonConvergence {
            what: "stage-1 domain probe".into(),
            trace: domain_trace,
        });
    }
    let dom_pred = heads.predict_domain(&z);
    let domain_train_acc =
        labeled.iter().filter(|&&i| dom_pred[i] == dom[i]).count() as f64 / labeled.len() as f64;

    // Step (ii): class head with the orthogonality term.
    let cw = dense_weights(features, &all, Reweight::ByDomainClass)?;
    let k_scale = 1.0 / k as f64;
    let mut adam = AdamState::new(heads.w1.data().len() + heads.b1.len());
    let mut class_trace = Vec::with_capacity(iters + 1);
    let mut ortho_trace = Vec::with_capacity(iters + 1);
    if cfg.ortho_mode == OrthoMode::Projection {
        heads = retract(&heads, OrthoMode::Projection, &mut repair_rng)?;
    }
    for t in 0..=iters {
        let (loss, gw, gb) = head_ce(&heads.w1, &heads.b1, heads.beta1, &z, y, &cw);
        class_trace.push(k_scale * loss);
        ortho_trace.push(ortho_norm(&heads));
        if !loss.is_finite() {
            return Err(CfaError::NonConvergence {
                what: "stage-1 class probe".into(),
                trace: class_trace,
            });
        }
        if t == iters {
            break;
        }
        let mut grad_w = gw.scale(k_scale);
        if cfg.ortho_mode == OrthoMode::Penalty && cfg.lambda_ortho > 0.0 {
            let (_, gp) = ortho_penalty(&heads.w1, &heads.w2)?;
            grad_w.add_scaled(cfg.lambda_ortho, &gp);
        }
        let mut params = heads.w1.data().to_vec();
        params.extend_from_slice(&heads.b1);
        let mut grads = grad_w.into_data();
        grads.extend(gb.iter().map(|g| g * k_scale));
        adamw_cosine_step(&mut adam, &mut params, &grads, t, iters, cfg.stage1_lr, cfg.weight_decay)?;
        let nw = heads.w1.data().len();
        heads.w1.data_mut().copy_from_slice(&params[..nw]);
        heads.b1.copy_from_slice(&params[nw..]);
        heads = retract(&heads, cfg.ortho_mode, &mut repair_rng)?;
    }

    if cfg.projection_cleanup {
        heads = retract(&heads, OrthoMode::Projection, &mut repair_rng)?;
    }
    let final_ortho = ortho_norm(&heads);
    if final_ortho > cfg.ortho_tol {
        if cfg.projection_cleanup {
            return Err(CfaError::NonConvergence {
                what: "stage-1 orthogonality cleanup".into(),
                trace: ortho_trace,
            });
        }
        log::warn!("probe finished with ||W1 W2^T||_F = {final_ortho:.3e} above tolerance {}", cfg.ortho_tol);
    }
    Ok(ProbeReport {
        heads,
        domain_trace,
        class_trace,
        ortho_trace,
        domain_train_acc,
    })
}

/// Class-only probe with cell-balanced weights: fits `W1` (and `b1`) of
/// `init` on frozen features, leaving `W2` untouched.
pub fn probe_class_head(features: &LabeledDataset, init: &HeadPair, cfg: &TrainConfig) -> Result<(HeadPair, Vec<f64>)> {
    cfg.validate()?;
    if features.input_dim() != init.dim() || features.num_classes() != init.num_classes() {
        return arg_err("features do not match the head shape");
    }
    let mut init_rng = RngState::new(cfg.seed).fork(12);
    let z = l2_normalize_rows(&features.inputs, NORM_EPS);
    let y = &features.class_labels;
    let all: Vec<usize> = (0..features.len()).collect();
    let cw = dense_weights(features, &all, Reweight::ByDomainClass)?;
    let mut heads = init.clone();
    heads.w1 = label_means(&z, y, &vec![true; z.rows()], init.num_classes(), &mut init_rng);
    if heads.mode == HeadMode::UnconstrainedWithBias {
        heads.b1.iter_mut().for_each(|b| *b = 0.0);
    }
    let iters = cfg.stage1_iters;
    let k_scale = 1.0 / init.num_classes() as f64;
    let mut adam = AdamState::new(heads.w1.data().len() + heads.b1.len());
    let mut trace = Vec::with_capacity(iters + 1);
    for t in 0..=iters {
        let (loss, gw, gb) = head_ce(&heads.w1, &heads.b1, heads.beta1, &z, y, &cw);
        trace.push(k_scale * loss);
        if !loss.is_finite() {
            return Err(CfaError::NonConvergence {
                what: "class probe".into(),
                trace,
            });
        }
        if t == iters {
            break;
        }
        let mut params = heads.w1.data().to_vec();
        params.extend_from_slice(&heads.b1);
        let mut grads: Vec<f64> = gw.data().iter().map(|g| g * k_scale).collect();
        grads.extend(gb.iter().map(|g| g * k_scale));
        adamw_cosine_step(&mut adam, &mut params, &grads, t, iters, cfg.stage1_lr, cfg.weight_decay)?;
        let nw = heads.w1.data().len();
        heads.w1.data_mut().copy_from_slice(&params[..nw]);
        heads.b1.copy_from_slice(&params[nw..]);
        if heads.mode == HeadMode::NormalizedNoBias {
            crate::linalg::l2_normalize_rows_in_place(&mut heads.w1, NORM_EPS);
        }
    }
    Ok((heads, trace))
}
