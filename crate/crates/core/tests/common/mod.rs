#![allow(dead_code)]

use cfa_core::encoder::{Activation, MlpEncoder};
use cfa_core::heads::{cfa_loss, ortho_penalty, HeadPair};
use cfa_core::linalg::{l2_normalize_rows, softmax_cross_entropy};
use cfa_core::{Matrix, RngState};

pub const FD_STEP: f64 = 1e-5;
pub const INSTANCES: usize = 50;

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x`.
pub fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|j| {
            p[j] = x[j] + FD_STEP;
            let up = f(&p);
            p[j] = x[j] - FD_STEP;
            let down = f(&p);
            p[j] = x[j];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn random_matrix(r: usize, c: usize, rng: &mut RngState) -> Matrix {
    Matrix::from_vec(r, c, rng.normal_vec(r * c)).unwrap()
}

/// Worst relative error of the cross-entropy gradient over random logits.
pub fn ce_worst(seed: u64) -> f64 {
    let mut rng = RngState::new(seed);
    (0..INSTANCES)
        .map(|_| {
            let k = 2 + rng.below(6);
            let logits: Vec<f64> = rng.normal_vec(k).iter().map(|v| 3.0 * v).collect();
            let t = rng.below(k);
            let (_, g) = softmax_cross_entropy(&logits, t).unwrap();
            let fd = central_diff(&logits, |l| softmax_cross_entropy(l, t).unwrap().0);
            rel_err(&g, &fd)
        })
        .fold(0.0, f64::max)
}

/// Worst relative error of the gradient of `||W1 W2ᵀ||_F²` in `W1`.
pub fn ortho_worst(seed: u64) -> f64 {
    let mut rng = RngState::new(seed);
    (0..INSTANCES)
        .map(|_| {
            let (k, e) = (2 + rng.below(4), 1 + rng.below(4));
            let d = k + e + rng.below(5);
            let w1 = random_matrix(k, d, &mut rng);
            let w2 = random_matrix(e, d, &mut rng);
            let (_, g) = ortho_penalty(&w1, &w2).unwrap();
            let fd = central_diff(w1.data(), |x| {
                ortho_penalty(&Matrix::from_vec(k, d, x.to_vec()).unwrap(), &w2).unwrap().0
            });
            rel_err(g.data(), &fd)
        })
        .fold(0.0, f64::max)
}

/// Which argument of the two-head loss is differentiated.
#[derive(Clone, Copy, Debug)]
pub enum LossArg {
    Z,
    W1,
    W2,
}

/// Worst relative error of the two-head loss gradient in `arg`. Half the
/// instances use unconstrained heads with biases, whose gradients are
/// checked alongside the head weights.
pub fn cfa_loss_worst(seed: u64, arg: LossArg) -> f64 {
    let mut rng = RngState::new(seed);
    (0..INSTANCES)
        .map(|inst| {
            let (k, e) = (2 + rng.below(4), 2 + rng.below(3));
            let d = k + e + rng.below(4);
            let n = 1 + rng.below(12);
            let beta1 = rng.uniform_range(1.0, 8.0);
            let beta2 = rng.uniform_range(1.0, 8.0);
            let lambda = rng.uniform_range(0.0, 3.0);
            let mut heads = HeadPair::orthonormal(k, e, d, beta1, beta2, &mut rng).unwrap();
            let biased = inst % 2 == 1;
            if biased {
                heads = HeadPair::unconstrained(random_matrix(k, d, &mut rng), random_matrix(e, d, &mut rng), beta1, beta2)
                    .unwrap();
                heads.b1 = rng.normal_vec(k);
                heads.b2 = rng.normal_vec(e);
            }
            let z = l2_normalize_rows(&random_matrix(n, d, &mut rng), 1e-12);
            let y: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
            let dom: Vec<usize> = (0..n).map(|_| rng.below(e)).collect();
            let present: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.7).collect();
            let out = cfa_loss(&heads, &z, &y, &dom, &present, lambda).unwrap();
            let loss_at = |h: &HeadPair, zz: &Matrix| cfa_loss(h, zz, &y, &dom, &present, lambda).unwrap().loss;
            match arg {
                LossArg::Z => {
                    let fd = central_diff(z.data(), |x| loss_at(&heads, &Matrix::from_vec(n, d, x.to_vec()).unwrap()));
                    rel_err(out.grad_z.data(), &fd)
                }
                LossArg::W1 => {
                    let mut x = heads.w1.data().to_vec();
                    x.extend_from_slice(&heads.b1);
                    let fd = central_diff(&x, |p| {
                        let mut h = heads.clone();
                        h.w1 = Matrix::from_vec(k, d, p[..k * d].to_vec()).unwrap();
                        h.b1 = p[k * d..].to_vec();
                        loss_at(&h, &z)
                    });
                    let mut g = out.grad_w1.data().to_vec();
                    g.extend_from_slice(&out.grad_b1);
                    rel_err(&g, &fd)
                }
                LossArg::W2 => {
                    let mut x = heads.w2.data().to_vec();
                    x.extend_from_slice(&heads.b2);
                    let fd = central_diff(&x, |p| {
                        let mut h = heads.clone();
                        h.w2 = Matrix::from_vec(e, d, p[..e * d].to_vec()).unwrap();
                        h.b2 = p[e * d..].to_vec();
                        loss_at(&h, &z)
                    });
                    let mut g = out.grad_w2.data().to_vec();
                    g.extend_from_slice(&out.grad_b2);
                    rel_err(&g, &fd)
                }
            }
        })
        .fold(0.0, f64::max)
}

/// Worst relative error of the MLP parameter gradient of `Σ G ⊙ Φ(X)`, with
/// the output normalization layer on.
pub fn mlp_worst(seed: u64) -> f64 {
    let mut rng = RngState::new(seed);
    (0..INSTANCES)
        .map(|inst| {
            let p = 2 + rng.below(5);
            let h = 2 + rng.below(6);
            let d = 2 + rng.below(4);
            let act = if inst % 2 == 0 { Activation::Tanh } else { Activation::Relu };
            let dims = if inst % 3 == 0 { vec![p, h, h, d] } else { vec![p, h, d] };
            // Random biases keep the pre-normalization output away from zero,
            // where the clamped normalization is not differentiable at step h.
            let mut enc = MlpEncoder::new(&dims, act, true, &mut rng).unwrap();
            let params = rng.normal_vec(enc.num_params());
            enc.set_flat_params(&params).unwrap();
            let n = 1 + rng.below(5);
            let x = random_matrix(n, p, &mut rng);
            let upstream = random_matrix(n, d, &mut rng);
            let cache = enc.forward_cached(&x).unwrap();
            let g = enc.backward(&cache, &upstream).unwrap();
            let fd = central_diff(&enc.flat_params(), |params| {
                let mut e2 = enc.clone();
                e2.set_flat_params(params).unwrap();
                e2.forward(&x).unwrap().frobenius_dot(&upstream)
            });
            rel_err(&g, &fd)
        })
        .fold(0.0, f64::max)
}
