//! Fully-connected network with batch normalization.
//!
//! Hidden layers are `affine -> batch norm -> sigmoid`; the last layer is
//! affine only. Weights are stored `in x out` so a batch (rows are samples)
//! maps as `Z = A W + b`.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;
pub const DEFAULT_HIDDEN: usize = 256;
/// Affine layers in the default network.
pub const DEFAULT_DEPTH: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; needs at least two samples.
    Train,
    /// Running statistics.
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn new(n: usize) -> Self {
        Self {
            gamma: Array1::ones(n),
            beta: Array1::zeros(n),
            running_mean: Array1::zeros(n),
            running_var: Array1::ones(n),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub norm: Option<BatchNorm>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

struct LayerCache {
    input: Array2<f64>,
    /// Normalized pre-activations and `1 / sqrt(var + eps)` (train mode).
    zhat: Option<(Array2<f64>, Array1<f64>)>,
    /// Batch mean and unbiased variance, for the running statistics.
    stats: Option<(Array1<f64>, Array1<f64>)>,
    output: Array2<f64>,
}

/// Result of a forward pass, kept for [`Mlp::backward`].
pub struct Forward {
    pub output: Array2<f64>,
    mode: Mode,
    caches: Vec<LayerCache>,
}

impl Forward {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// Gradients shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub gamma: Option<Array1<f64>>,
    pub beta: Option<Array1<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub layers: Vec<LayerGrads>,
}

impl Grads {
    /// Flattened in parameter order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend(g.weight.iter());
            out.extend(g.bias.iter());
            if let (Some(gm), Some(bt)) = (&g.gamma, &g.beta) {
                out.extend(gm.iter());
                out.extend(bt.iter());
            }
        }
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Mlp {
    /// Xavier-uniform weights from a seeded generator. The output bias is 1
    /// on every fourth unit, so an untrained network with the quaternion
    /// head starts near the identity rotation.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Contract(format!("invalid layer widths {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (widths[l], widths[l + 1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-a..a));
                let last = l + 1 == n;
                let mut bias = Array1::zeros(fan_out);
                if last && fan_out % 4 == 0 {
                    bias.iter_mut().step_by(4).for_each(|b| *b = 1.0);
                }
                Layer {
                    weight,
                    bias,
                    norm: (!last).then(|| BatchNorm::new(fan_out)),
                    activation: if last { Activation::Linear } else { Activation::Sigmoid },
                }
            })
            .collect();
        Ok(Self { layers })
    }

    /// `features -> hidden x (depth - 1) -> outputs`.
    pub fn with_hidden(features: usize, hidden: usize, depth: usize, outputs: usize, seed: u64) -> Result<Self> {
        if depth < 1 {
            return Err(Error::Contract("network needs at least one layer".into()));
        }
        let mut widths = vec![features];
        widths.extend(std::iter::repeat_n(hidden, depth - 1));
        widths.push(outputs);
        Self::new(&widths, seed)
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("network has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            let out = l.weight.ncols();
            if l.bias.len() != out {
                return Err(Error::Contract(format!("layer {i} bias length mismatch")));
            }
            if i + 1 < layers.len() && layers[i + 1].weight.nrows() != out {
                return Err(Error::Contract(format!("layer {i} output does not feed layer {}", i + 1)));
            }
            if let Some(bn) = &l.norm {
                if [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var].iter().any(|v| v.len() != out) {
                    return Err(Error::Contract(format!("layer {i} batch-norm length mismatch")));
                }
                if bn.running_var.iter().any(|v| !(*v > 0.0)) {
                    return Err(Error::Contract(format!("layer {i} running variance must be positive")));
                }
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].weight.nrows()];
        w.extend(self.layers.iter().map(|l| l.weight.ncols()));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.ncols()
    }

    /// Trainable parameters: per layer `W`, `b`, then `gamma`, `beta` if normalized.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len() + l.norm.as_ref().map_or(0, |n| 2 * n.gamma.len()))
            .sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
            if let Some(n) = &l.norm {
                out.extend(n.gamma.iter());
                out.extend(n.beta.iter());
            }
        }
        out
    }

    /// Mutable views of every trainable parameter block, in flat order.
    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
            if let Some(n) = &mut l.norm {
                out.push(n.gamma.as_slice_mut().expect("standard layout"));
                out.push(n.beta.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::Contract(format!("expected {} parameters, got {}", self.param_count(), values.len())));
        }
        let mut off = 0;
        for block in self.param_blocks_mut() {
            block.copy_from_slice(&values[off..off + block.len()]);
            off += block.len();
        }
        Ok(())
    }

    /// Forward a batch (one sample per row).
    pub fn forward(&self, x: &Array2<f64>, mode: Mode) -> Result<Forward> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Contract(format!(
                "input has {} features, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let n = x.nrows();
        if mode == Mode::Train && n < 2 {
            return Err(Error::Contract(format!("training-mode batch norm needs >= 2 samples, got {n}")));
        }
        let mut a = x.to_owned();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut z = a.dot(&layer.weight);
            z += &layer.bias;
            let (mut zhat, mut stats) = (None, None);
            if let Some(bn) = &layer.norm {
                let (mean, var) = match mode {
                    Mode::Train => {
                        let mean = z.mean_axis(Axis(0)).unwrap();
                        let var = z.var_axis(Axis(0), 0.0);
                        let unbiased = &var * (n as f64 / (n as f64 - 1.0));
                        stats = Some((mean.clone(), unbiased));
                        (mean, var)
                    }
                    Mode::Infer => (bn.running_mean.clone(), bn.running_var.clone()),
                };
                let inv = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                z -= &mean;
                z *= &inv;
                if mode == Mode::Train {
                    zhat = Some((z.clone(), inv));
                }
                z *= &bn.gamma;
                z += &bn.beta;
            }
            if layer.activation == Activation::Sigmoid {
                z.mapv_inplace(sigmoid);
            }
            let input = std::mem::replace(&mut a, z);
            caches.push(LayerCache { input, zhat, stats, output: Array2::zeros((0, 0)) });
            if mode == Mode::Train {
                caches.last_mut().unwrap().output = a.clone();
            }
        }
        Ok(Forward { output: a, mode, caches })
    }

    /// Inference on a batch.
    pub fn infer(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x, Mode::Infer)?.output)
    }

    /// Parameter gradients given `dL/doutput`.
    pub fn backward(&self, fwd: &Forward, grad_out: &Array2<f64>) -> Result<Grads> {
        if fwd.mode != Mode::Train {
            return Err(Error::Contract("backward needs a training-mode forward pass".into()));
        }
        if grad_out.dim() != fwd.output.dim() {
            return Err(Error::Contract("output gradient shape mismatch".into()));
        }
        let n = grad_out.nrows() as f64;
        let mut g = grad_out.to_owned();
        let mut grads = Vec::with_capacity(self.layers.len());
        for (layer, cache) in self.layers.iter().zip(&fwd.caches).rev() {
            if layer.activation == Activation::Sigmoid {
                Zip::from(&mut g).and(&cache.output).for_each(|g, &a| *g *= a * (1.0 - a));
            }
            let (mut gamma_g, mut beta_g) = (None, None);
            if let (Some(bn), Some((zhat, inv))) = (&layer.norm, &cache.zhat) {
                beta_g = Some(g.sum_axis(Axis(0)));
                gamma_g = Some((&g * zhat).sum_axis(Axis(0)));
                let dzhat = &g * &bn.gamma;
                let sum_d = dzhat.sum_axis(Axis(0));
                let sum_dz = (&dzhat * zhat).sum_axis(Axis(0));
                let mut dz = dzhat * n;
                dz -= &sum_d;
                dz -= &(zhat * &sum_dz);
                dz *= &(inv / n);
                g = dz;
            }
            let weight = cache.input.t().dot(&g);
            let bias = g.sum_axis(Axis(0));
            let next = g.dot(&layer.weight.t());
            grads.push(LayerGrads { weight, bias, gamma: gamma_g, beta: beta_g });
            g = next;
        }
        grads.reverse();
        Ok(Grads { layers: grads })
    }

    /// Fold a training pass's batch statistics into the running statistics.
    pub fn update_running_stats(&mut self, fwd: &Forward) {
        for (layer, cache) in self.layers.iter_mut().zip(&fwd.caches) {
            if let (Some(bn), Some((mean, var))) = (&mut layer.norm, &cache.stats) {
                bn.running_mean.zip_mut_with(mean, |r, m| *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m);
                bn.running_var.zip_mut_with(var, |r, v| *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v);
            }
        }
    }

    #[cfg(test)]
    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn batch(seed: u64, n: usize, d: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn default_shape() {
        let net = Mlp::with_hidden(252, DEFAULT_HIDDEN, DEFAULT_DEPTH, 84, 0).unwrap();
        assert_eq!(net.widths(), vec![252, 256, 256, 256, 256, 256, 256, 84]);
        assert_eq!(net.layers().len(), 7);
        assert!(net.layers()[..6].iter().all(|l| l.norm.is_some() && l.activation == Activation::Sigmoid));
        assert!(net.layers()[6].norm.is_none() && net.layers()[6].activation == Activation::Linear);
        assert_eq!(net.param_count(), net.params_flat().len());
    }

    #[test]
    fn train_mode_needs_two_samples() {
        let net = Mlp::new(&[3, 4, 2], 0).unwrap();
        assert!(matches!(net.forward(&batch(0, 1, 3), Mode::Train), Err(Error::Contract(_))));
        assert!(net.forward(&batch(0, 1, 3), Mode::Infer).is_ok());
    }

    #[test]
    fn infer_is_deterministic_and_batch_independent() {
        let net = Mlp::new(&[5, 8, 8, 3], 4).unwrap();
        let x = batch(1, 6, 5);
        let y = net.infer(&x).unwrap();
        assert_eq!(y, Mlp::new(&[5, 8, 8, 3], 4).unwrap().infer(&x).unwrap());
        let single = net.infer(&x.slice(ndarray::s![2..3, ..]).to_owned()).unwrap();
        assert_eq!(single.row(0), y.row(2));
    }

    #[test]
    fn train_mode_normalizes_batch() {
        let mut net = Mlp::new(&[4, 6, 2], 2).unwrap();
        net.layers_mut()[0].activation = Activation::Linear;
        let x = batch(3, 10, 4);
        let f = net.forward(&x, Mode::Train).unwrap();
        let h = &f.caches[1].input;
        for c in 0..6 {
            let col = h.column(c);
            assert_abs_diff_eq!(col.mean().unwrap(), 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(col.var(0.0), 1.0, epsilon = 1e-3);
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut net = Mlp::new(&[2, 3, 1], 0).unwrap();
        let x = batch(5, 8, 2);
        let f = net.forward(&x, Mode::Train).unwrap();
        let z = x.dot(&net.layers()[0].weight);
        net.update_running_stats(&f);
        let bn = net.layers()[0].norm.as_ref().unwrap();
        let mean = z.mean_axis(Axis(0)).unwrap();
        let var = z.var_axis(Axis(0), 1.0);
        for c in 0..3 {
            assert_abs_diff_eq!(bn.running_mean[c], 0.1 * mean[c], epsilon = 1e-12);
            assert_abs_diff_eq!(bn.running_var[c], 0.9 + 0.1 * var[c], epsilon = 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences_for_linear_readout() {
        // L = sum(output * c) for a fixed random c.
        let net = Mlp::new(&[4, 6, 5, 3], 7).unwrap();
        let x = batch(8, 5, 4);
        let c = batch(9, 5, 3);
        let f = net.forward(&x, Mode::Train).unwrap();
        let g = net.backward(&f, &c).unwrap().to_flat();
        let p = net.params_flat();
        let loss = |p: &[f64]| {
            let mut m = net.clone();
            m.set_params_flat(p).unwrap();
            (m.forward(&x, Mode::Train).unwrap().output * &c).sum()
        };
        let h = 1e-5;
        for i in 0..p.len() {
            let mut up = p.clone();
            let mut dn = p.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (loss(&up) - loss(&dn)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * fd.abs().max(1.0), "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn backward_rejects_infer_pass() {
        let net = Mlp::new(&[2, 3, 1], 0).unwrap();
        let f = net.forward(&batch(0, 4, 2), Mode::Infer).unwrap();
        assert!(matches!(net.backward(&f, &Array2::zeros((4, 1))), Err(Error::Contract(_))));
    }

    #[test]
    fn flat_params_round_trip() {
        let mut net = Mlp::new(&[3, 4, 2], 1).unwrap();
        let p: Vec<f64> = (0..net.param_count()).map(|i| i as f64).collect();
        net.set_params_flat(&p).unwrap();
        assert_eq!(net.params_flat(), p);
        assert_eq!(net.layers()[0].weight[[0, 1]], 1.0);
        assert_eq!(net.layers()[0].bias[0], 12.0);
        assert!(net.set_params_flat(&p[1..]).is_err());
    }
}
