//! MLP feature encoder with unit-norm outputs and exact backpropagation.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::linalg::{dot, norm, Matrix, RngState, NORM_EPS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `a` and output `h`.
    #[inline]
    fn deriv(self, a: f64, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Fully connected network `p -> hidden ... -> d`. The activation follows
/// every layer except the last; the output is optionally L2-normalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpEncoder {
    pub layer_dims: Vec<usize>,
    /// `weights[l]` is `dims[l+1] x dims[l]`.
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub activation: Activation,
    pub output_normalize: bool,
}

/// Activations kept from a forward pass for [`MlpEncoder::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Layer inputs: `inputs[0]` is `x`, `inputs[l]` feeds layer `l`.
    inputs: Vec<Matrix>,
    /// Pre-activations of every layer.
    pre: Vec<Matrix>,
    /// Final output norms before normalization.
    out_norms: Vec<f64>,
    /// Final output (normalized when enabled).
    pub output: Matrix,
}

impl MlpEncoder {
    /// Random initialization: weights `N(0, gain/fan_in)` with gain 1 for tanh
    /// and 2 for relu; zero biases.
    pub fn new(layer_dims: &[usize], activation: Activation, output_normalize: bool, rng: &mut RngState) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return arg_err(format!("need at least two positive layer sizes, got {layer_dims:?}"));
        }
        let gain = match activation {
            Activation::Tanh => 1.0,
            Activation::Relu => 2.0,
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (gain / fan_in as f64).sqrt();
            let data = rng.normal_vec(fan_in * fan_out).into_iter().map(|v| v * std).collect();
            weights.push(Matrix::from_vec(fan_out, fan_in, data)?);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            activation,
            output_normalize,
        })
    }

    /// Single linear layer set to the identity.
    pub fn identity(dim: usize, output_normalize: bool) -> Result<Self> {
        if dim == 0 {
            return arg_err("identity encoder needs a positive dimension");
        }
        Ok(Self {
            layer_dims: vec![dim, dim],
            weights: vec![Matrix::identity(dim)],
            biases: vec![vec![0.0; dim]],
            activation: Activation::Tanh,
            output_normalize,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("at least two dims")
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.output)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<ForwardCache> {
        if x.cols() != self.input_dim() {
            return arg_err(format!(
                "input width {} does not match encoder input {}",
                x.cols(),
                self.input_dim()
            ));
        }
        let last = self.weights.len() - 1;
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut pre = Vec::with_capacity(self.weights.len());
        let mut h = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut a = h.matmul_t(w);
            for r in 0..a.rows() {
                for (v, bi) in a.row_mut(r).iter_mut().zip(b) {
                    *v += bi;
                }
            }
            let next = if l < last { a.map(|v| self.activation.apply(v)) } else { a.clone() };
            inputs.push(h);
            pre.push(a);
            h = next;
        }
        let mut out_norms = Vec::new();
        if self.output_normalize {
            out_norms.reserve(h.rows());
            for r in 0..h.rows() {
                let row = h.row_mut(r);
                let n = norm(row);
                out_norms.push(n);
                let denom = n.max(NORM_EPS);
                row.iter_mut().for_each(|v| *v /= denom);
            }
        }
        Ok(ForwardCache {
            inputs,
            pre,
            out_norms,
            output: h,
        })
    }

    /// Gradient of a scalar loss with respect to all parameters, in the
    /// layout of [`MlpEncoder::flat_params`], given `dL/d(output)`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<Vec<f64>> {
        if upstream.shape() != cache.output.shape() {
            return arg_err(format!(
                "upstream gradient {:?} does not match output {:?}",
                upstream.shape(),
                cache.output.shape()
            ));
        }
        let mut g = upstream.clone();
        if self.output_normalize {
            // d(u/|u|) = (I - z zᵀ)/|u|; a clamped denominator is a constant.
            for r in 0..g.rows() {
                let n = cache.out_norms[r];
                let z = cache.output.row(r);
                let gr = g.row_mut(r);
                if n > NORM_EPS {
                    let c = dot(gr, z);
                    for (gv, zv) in gr.iter_mut().zip(z) {
                        *gv = (*gv - c * zv) / n;
                    }
                } else {
                    gr.iter_mut().for_each(|v| *v /= NORM_EPS);
                }
            }
        }

        let mut grads: Vec<(Matrix, Vec<f64>)> = Vec::with_capacity(self.weights.len());
        for l in (0..self.weights.len()).rev() {
            let gw = g.t_matmul(&cache.inputs[l]);
            let mut gb = vec![0.0; g.cols()];
            for row in g.row_iter() {
                for (b, v) in gb.iter_mut().zip(row) {
                    *b += v;
                }
            }
            if l > 0 {
                let mut gh = g.matmul(&self.weights[l]);
                let a = &cache.pre[l - 1];
                let h = &cache.inputs[l];
                for ((gv, &av), &hv) in gh.data_mut().iter_mut().zip(a.data()).zip(h.data()) {
                    *gv *= self.activation.deriv(av, hv);
                }
                g = gh;
            }
            grads.push((gw, gb));
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(self.num_params());
        for (gw, gb) in grads {
            flat.extend_from_slice(gw.data());
            flat.extend_from_slice(&gb);
        }
        Ok(flat)
    }

    /// Parameters flattened layer by layer: weights row-major, then biases.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            v.extend_from_slice(w.data());
            v.extend_from_slice(b);
        }
        v
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return arg_err(format!("expected {} encoder parameters, got {}", self.num_params(), flat.len()));
        }
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let nw = w.data().len();
            w.data_mut().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = b.len();
            b.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn same_architecture(&self, other: &MlpEncoder) -> bool {
        self.layer_dims == other.layer_dims
            && self.activation == other.activation
            && self.output_normalize == other.output_normalize
    }
}

/// `(1 - alpha) * a + alpha * b` elementwise. The endpoints return exact
/// copies so interpolation at 0 or 1 is bit-identical to the input.
pub fn wise_interpolate(theta_a: &[f64], theta_b: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if theta_a.len() != theta_b.len() {
        return arg_err(format!(
            "parameter vectors differ in length: {} vs {}",
            theta_a.len(),
            theta_b.len()
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return arg_err(format!("alpha must be in [0, 1], got {alpha}"));
    }
    if alpha == 0.0 {
        return Ok(theta_a.to_vec());
    }
    if alpha == 1.0 {
        return Ok(theta_b.to_vec());
    }
    Ok(theta_a
        .iter()
        .zip(theta_b)
        .map(|(a, b)| (1.0 - alpha) * a + alpha * b)
        .collect())
}

/// Interpolates two encoders of identical architecture.
pub fn wise_interpolate_encoder(a: &MlpEncoder, b: &MlpEncoder, alpha: f64) -> Result<MlpEncoder> {
    if !a.same_architecture(b) {
        return arg_err("encoders differ in architecture");
    }
    let mut out = a.clone();
    out.set_flat_params(&wise_interpolate(&a.flat_params(), &b.flat_params(), alpha)?)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_layer_normalizes() {
        let enc = MlpEncoder::identity(2, true).unwrap();
        let z = enc.forward(&Matrix::from_rows(&[[3.0, 4.0]]).unwrap()).unwrap();
        assert_eq!(z.row(0), &[0.6, 0.8]);
        assert!(enc.forward(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn outputs_have_unit_norm() {
        let mut rng = RngState::new(0);
        let enc = MlpEncoder::new(&[5, 16, 4], Activation::Tanh, true, &mut rng).unwrap();
        let x = Matrix::from_vec(30, 5, rng.normal_vec(150)).unwrap();
        for row in enc.forward(&x).unwrap().row_iter() {
            assert!((norm(row) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_relu_network_hits_eps_guard() {
        let mut rng = RngState::new(0);
        let mut enc = MlpEncoder::new(&[3, 4, 2], Activation::Relu, true, &mut rng).unwrap();
        let zeros = vec![0.0; enc.num_params()];
        enc.set_flat_params(&zeros).unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0, 0.5]]).unwrap();
        let cache = enc.forward_cached(&x).unwrap();
        assert_eq!(cache.output.row(0), &[0.0, 0.0]);
        let g = enc.backward(&cache, &Matrix::from_rows(&[[1.0, 0.0]]).unwrap()).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_and_radial_upstream_give_zero_grads() {
        let mut rng = RngState::new(1);
        let enc = MlpEncoder::new(&[4, 6, 3], Activation::Tanh, true, &mut rng).unwrap();
        let x = Matrix::from_vec(5, 4, rng.normal_vec(20)).unwrap();
        let cache = enc.forward_cached(&x).unwrap();
        let g = enc.backward(&cache, &Matrix::zeros(5, 3)).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let radial = cache.output.scale(2.5);
        let g = enc.backward(&cache, &radial).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12), "{:?}", g.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }

    #[test]
    fn last_layer_scale_invariance() {
        let mut rng = RngState::new(2);
        let enc = MlpEncoder::new(&[4, 8, 3], Activation::Tanh, true, &mut rng).unwrap();
        let mut scaled = enc.clone();
        scaled.weights[1] = scaled.weights[1].scale(3.7);
        scaled.biases[1].iter_mut().for_each(|b| *b *= 3.7);
        let x = Matrix::from_vec(10, 4, rng.normal_vec(40)).unwrap();
        assert!(enc.forward(&x).unwrap().max_abs_diff(&scaled.forward(&x).unwrap()) < 1e-10);
    }

    #[test]
    fn wise_endpoints_and_midpoint() {
        assert_eq!(wise_interpolate(&[0.0], &[2.0], 0.5).unwrap(), vec![1.0]);
        let a = [0.1, -3.0, 1e-300];
        let b = [7.0, 2.0, -5.0];
        assert_eq!(wise_interpolate(&a, &b, 0.0).unwrap(), a.to_vec());
        assert_eq!(wise_interpolate(&a, &b, 1.0).unwrap(), b.to_vec());
        assert!(wise_interpolate(&a, &b[..2], 0.5).is_err());
        assert!(wise_interpolate(&a, &b, 1.5).is_err());
    }

    #[test]
    fn flat_params_round_trip() {
        let mut rng = RngState::new(3);
        let enc = MlpEncoder::new(&[3, 5, 2], Activation::Relu, false, &mut rng).unwrap();
        let mut other = MlpEncoder::new(&[3, 5, 2], Activation::Relu, false, &mut rng).unwrap();
        other.set_flat_params(&enc.flat_params()).unwrap();
        assert_eq!(other, enc);
        assert_eq!(enc.num_params(), 3 * 5 + 5 + 5 * 2 + 2);
    }
}
