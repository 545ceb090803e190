use std::f64::consts::PI;

use crate::error::{arg_err, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Cosine annealing from `base` at `t = 0` to 0 at `t = total`.
pub fn cosine_lr(base: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = t.min(total) as f64 / total as f64;
    base * 0.5 * (1.0 + (PI * frac).cos())
}

/// AdamW moment buffers for one flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One AdamW step with bias correction and decoupled weight decay at the
/// cosine-annealed rate `lr(t)`. `step_index` is zero-based; `t = T` is
/// accepted and leaves the parameters unchanged.
pub fn adamw_cosine_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    step_index: usize,
    total_steps: usize,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != state.len() || grads.len() != state.len() {
        return arg_err(format!(
            "optimizer holds {} parameters, got {} params and {} grads",
            state.len(),
            params.len(),
            grads.len()
        ));
    }
    if step_index > total_steps {
        return arg_err(format!("step {step_index} beyond schedule length {total_steps}"));
    }
    let lr_t = cosine_lr(lr, step_index, total_steps);
    let t = (step_index + 1) as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        if lr_t == 0.0 {
            continue;
        }
        let update = (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        *p -= lr_t * (update + weight_decay * *p);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_monotone() {
        assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
        assert!(cosine_lr(0.1, 100, 100).abs() < 1e-18);
        assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() < 1e-15);
        let lrs: Vec<f64> = (0..=100).map(|t| cosine_lr(1.0, t, 100)).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut s = AdamState::new(3);
        let mut p = vec![1.0, -2.0, 3.0];
        adamw_cosine_step(&mut s, &mut p, &[0.0; 3], 0, 10, 0.1, 0.0).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn final_step_does_not_move() {
        let mut s = AdamState::new(1);
        let mut p = vec![0.5];
        adamw_cosine_step(&mut s, &mut p, &[3.0], 10, 10, 0.1, 0.01).unwrap();
        assert_eq!(p, vec![0.5]);
        assert!(adamw_cosine_step(&mut s, &mut p, &[3.0], 11, 10, 0.1, 0.01).is_err());
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = AdamState::new(1);
        let mut p = vec![0.0];
        adamw_cosine_step(&mut s, &mut p, &[1.0], 0, 100, 1e-3, 0.0).unwrap();
        // m̂ = v̂ = 1, so the step is lr / (1 + eps).
        assert!((p[0] + 1e-3 / (1.0 + ADAM_EPS)).abs() < 1e-18);
    }
}
