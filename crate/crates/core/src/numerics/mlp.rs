//! Fixed-topology multilayer perceptrons with hand-rolled reverse-mode
//! gradients. Hidden layers use ReLU (subgradient 0 at 0); the output layer
//! is affine. The batched entry points are the hot path; single-sample
//! wrappers exist for convenience and for the per-transition contracts.

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::rng::Prng;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Layer {
    /// Shape (out, in).
    weight: Array2<f64>,
    bias: Array1<f64>,
}

/// A dense feed-forward network. Parameter count is fixed at construction;
/// weights initialize uniform in ±sqrt(6 / (fan_in + fan_out)), biases zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    layers: Vec<Layer>,
}

/// Per-layer parameter gradients, shaped like the network they came from.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    weight: Vec<Array2<f64>>,
    bias: Vec<Array1<f64>>,
}

/// Forward-pass intermediates consumed by [`Mlp::backward_batch`].
#[derive(Debug, Clone)]
pub struct MlpBatchCache {
    /// inputs[l] is the (batch, in_l) input fed to layer l.
    inputs: Vec<Array2<f64>>,
    /// pres[l] is the (batch, out_l) pre-activation of layer l.
    pres: Vec<Array2<f64>>,
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|x| if x > 0.0 { x } else { 0.0 });
}

impl Mlp {
    pub fn new(sizes: &[usize], rng: &mut Prng) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config(
                "mlp needs at least an input and an output size".into(),
            ));
        }
        if sizes.iter().any(|&n| n == 0) {
            return Err(Error::Config(format!(
                "mlp layer sizes must be positive, got {sizes:?}"
            )));
        }
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weight =
                Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound));
            layers.push(Layer {
                weight,
                bias: Array1::zeros(fan_out),
            });
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    fn check_input_cols(&self, input: &Array2<f64>) -> Result<()> {
        if input.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "mlp expects input dim {}, got {}",
                self.input_dim(),
                input.ncols()
            )));
        }
        Ok(())
    }

    /// Batched forward pass: rows are samples.
    pub fn forward_batch(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input_cols(input)?;
        let last = self.layers.len() - 1;
        let mut h = input.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut pre = h.dot(&layer.weight.t());
            pre += &layer.bias;
            if l != last {
                relu_inplace(&mut pre);
            }
            h = pre;
        }
        Ok(h)
    }

    /// Batched forward pass that records the intermediates needed for a
    /// subsequent backward pass over the same input.
    pub fn forward_batch_cached(&self, input: &Array2<f64>) -> Result<(Array2<f64>, MlpBatchCache)> {
        self.check_input_cols(input)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut h = input.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut pre = h.dot(&layer.weight.t());
            pre += &layer.bias;
            inputs.push(h);
            pres.push(pre.clone());
            if l != last {
                relu_inplace(&mut pre);
            }
            h = pre;
        }
        Ok((h, MlpBatchCache { inputs, pres }))
    }

    /// Reverse-mode pass. `out_grad` holds dL/d(output) per row; returns
    /// parameter gradients and dL/d(input) per row.
    pub fn backward_batch(
        &self,
        cache: &MlpBatchCache,
        out_grad: &Array2<f64>,
    ) -> Result<(MlpGrads, Array2<f64>)> {
        let last = self.layers.len() - 1;
        if out_grad.ncols() != self.output_dim() || out_grad.nrows() != cache.pres[last].nrows() {
            return Err(Error::Shape(format!(
                "backward expects grad shape ({}, {}), got ({}, {})",
                cache.pres[last].nrows(),
                self.output_dim(),
                out_grad.nrows(),
                out_grad.ncols()
            )));
        }
        let mut grads = MlpGrads::zeros_like(self);
        let mut delta = out_grad.to_owned();
        for l in (0..self.layers.len()).rev() {
            if l != last {
                // delta currently holds dL/d(post-activation); mask by ReLU.
                delta.zip_mut_with(&cache.pres[l], |d, &p| {
                    if p <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            grads.weight[l] = delta.t().dot(&cache.inputs[l]);
            grads.bias[l] = delta.sum_axis(Axis(0));
            delta = delta.dot(&self.layers[l].weight);
        }
        Ok((grads, delta))
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &Array1<f64>) -> Result<Array1<f64>> {
        let row = input.view().insert_axis(Axis(0)).to_owned();
        Ok(self.forward_batch(&row)?.row(0).to_owned())
    }

    /// Single-sample reverse pass; recomputes the forward intermediates for
    /// `input` internally. Returns (parameter gradients, input gradient).
    pub fn backward(
        &self,
        input: &Array1<f64>,
        out_grad: &Array1<f64>,
    ) -> Result<(MlpGrads, Array1<f64>)> {
        let x = input.view().insert_axis(Axis(0)).to_owned();
        let g = out_grad.view().insert_axis(Axis(0)).to_owned();
        let (_, cache) = self.forward_batch_cached(&x)?;
        let (grads, input_grad) = self.backward_batch(&cache, &g)?;
        Ok((grads, input_grad.row(0).to_owned()))
    }

    /// Flattens all parameters layer by layer (weights row-major, then bias).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} params, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            for w in l.weight.iter_mut() {
                *w = flat[at];
                at += 1;
            }
            for b in l.bias.iter_mut() {
                *b = flat[at];
                at += 1;
            }
        }
        Ok(())
    }

    /// target <- (1 - rho) * target + rho * source, elementwise over params.
    /// Shapes must match exactly.
    pub fn blend_from(&mut self, source: &Mlp, rho: f64) -> Result<()> {
        if self.sizes != source.sizes {
            return Err(Error::Shape("blend_from requires identical topology".into()));
        }
        for (dst, src) in self.layers.iter_mut().zip(&source.layers) {
            dst.weight.zip_mut_with(&src.weight, |d, &s| {
                *d = (1.0 - rho) * *d + rho * s;
            });
            dst.bias.zip_mut_with(&src.bias, |d, &s| {
                *d = (1.0 - rho) * *d + rho * s;
            });
        }
        Ok(())
    }
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weight: net
                .layers
                .iter()
                .map(|l| Array2::zeros(l.weight.raw_dim()))
                .collect(),
            bias: net
                .layers
                .iter()
                .map(|l| Array1::zeros(l.bias.raw_dim()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weight {
            *w *= factor;
        }
        for b in &mut self.bias {
            *b *= factor;
        }
    }

    /// Flattened in the same order as [`Mlp::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weight.iter().zip(&self.bias) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.flat().iter().fold(0.0_f64, |m, &g| m.max(g.abs()))
    }
}
