//! Dense multilayer perceptrons with hand-written reverse-mode gradients.
//!
//! All arithmetic is `f64`. Batches are row-major `(batch, features)` matrices.

mod checkpoint;
mod heads;
mod optim;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use heads::{
    gaussian_kl, gaussian_log_prob, gaussian_log_prob_grad, log_softmax, softmax, GaussianHead,
    GaussianParams, Squash,
};
pub use optim::{Adam, AdamConfig, TargetPair, TargetUpdate};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Elu,
}

impl Activation {
    fn apply(self, x: &mut Array2<f64>) {
        match self {
            Activation::Relu => x.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => x.mapv_inplace(f64::tanh),
            Activation::Elu => x.mapv_inplace(|v| if v > 0.0 { v } else { v.exp_m1() }),
        }
    }

    /// Multiplies `grad` by the derivative, expressed through the activation output.
    fn backprop(self, output: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Relu => ndarray::Zip::from(grad)
                .and(output)
                .for_each(|g, &y| {
                    if y <= 0.0 {
                        *g = 0.0
                    }
                }),
            Activation::Tanh => ndarray::Zip::from(grad)
                .and(output)
                .for_each(|g, &y| *g *= 1.0 - y * y),
            Activation::Elu => ndarray::Zip::from(grad)
                .and(output)
                .for_each(|g, &y| {
                    if y <= 0.0 {
                        *g *= y + 1.0
                    }
                }),
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Elu => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Elu),
            _ => None,
        }
    }
}

/// Interpretation of the final linear layer's output.
#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Linear,
    DiagonalGaussian(GaussianHead),
    Categorical { atoms: usize },
}

impl Head {
    pub fn raw_outputs(&self, out: usize) -> usize {
        match self {
            Head::Linear => out,
            Head::DiagonalGaussian(g) => 2 * g.act_dim,
            Head::Categorical { atoms } => *atoms,
        }
    }
}

/// One affine layer, `y = x W + b` with `W` of shape `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    layers: Vec<Dense>,
    activation: Activation,
    head: Head,
}

/// Layer inputs saved by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
}

/// Parameter gradients, shaped like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<Dense>,
}

impl Grads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Dense {
                    w: Array2::zeros(l.w.raw_dim()),
                    b: Array1::zeros(l.b.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w += &b.w;
            a.b += &b.b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.w *= factor;
            l.b *= factor;
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.w.iter().chain(l.b.iter()).map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(l.b.iter()).copied())
            .collect()
    }

    /// Location of the first non-finite entry as `(layer, is_bias)`.
    pub fn first_non_finite(&self) -> Option<(usize, bool)> {
        self.layers.iter().enumerate().find_map(|(i, l)| {
            if l.w.iter().any(|v| !v.is_finite()) {
                Some((i, false))
            } else if l.b.iter().any(|v| !v.is_finite()) {
                Some((i, true))
            } else {
                None
            }
        })
    }
}

impl Mlp {
    /// Builds a network with fan-in scaled uniform weights and zero biases.
    /// `sizes` runs from the input width to the last hidden width; the output
    /// width follows from `head` (or `out` for a linear head).
    pub fn new(
        input: usize,
        hidden: &[usize],
        out: usize,
        activation: Activation,
        head: Head,
        final_layer_scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(head.raw_outputs(out));
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                let mut limit = 1.0 / (fan_in as f64).sqrt();
                if i + 1 == n {
                    limit *= final_layer_scale;
                }
                let w = Array2::from_shape_fn((fan_in, fan_out), |_| {
                    if limit > 0.0 {
                        rng.random_range(-limit..limit)
                    } else {
                        0.0
                    }
                });
                Dense {
                    w,
                    b: Array1::zeros(fan_out),
                }
            })
            .collect();
        Self {
            sizes,
            layers,
            activation,
            head,
        }
    }

    pub fn from_layers(layers: Vec<Dense>, activation: Activation, head: Head) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::InvalidArgument("network needs at least one layer".into()))?;
        let mut sizes = vec![first.w.nrows()];
        for (i, l) in layers.iter().enumerate() {
            if l.w.nrows() != sizes[i] || l.b.len() != l.w.ncols() {
                return Err(Error::shape(
                    format!("layer {i} with {} inputs", sizes[i]),
                    format!("{:?} / bias {}", l.w.dim(), l.b.len()),
                ));
            }
            sizes.push(l.w.ncols());
        }
        Ok(Self {
            sizes,
            layers,
            activation,
            head,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least one layer")
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(l.b.iter()).copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count(), "flat parameter count");
        let mut it = params.iter();
        for l in &mut self.layers {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = *it.next().expect("length checked");
            }
        }
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(
                format!("{} input features", self.input_dim()),
                x.ncols(),
            ));
        }
        Ok(())
    }

    /// Raw output rows (the pre-head values) for a batch.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let mut h = x.dot(&self.layers[0].w) + &self.layers[0].b;
        if last > 0 {
            self.activation.apply(&mut h);
        }
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            h = h.dot(&layer.w) + &layer.b;
            if i < last {
                self.activation.apply(&mut h);
            }
        }
        Ok(h)
    }

    /// Forward pass that keeps what the backward pass needs.
    pub fn forward_train(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = h.dot(&layer.w) + &layer.b;
            if i < last {
                self.activation.apply(&mut next);
            }
            inputs.push(h);
            h = next;
        }
        Ok((h, ForwardCache { inputs }))
    }

    /// Single-row forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("contiguous row");
        Ok(self.forward_batch(view)?.into_raw_vec_and_offset().0)
    }

    /// Gradients of `sum(upstream * output)` with respect to the parameters
    /// and the network input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<f64>,
    ) -> Result<(Grads, Array2<f64>)> {
        let batch = cache.inputs[0].nrows();
        if upstream.dim() != (batch, self.output_dim()) {
            return Err(Error::shape(
                format!("({batch}, {})", self.output_dim()),
                format!("{:?}", upstream.dim()),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            let gw = input.t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            let mut prev = delta.dot(&layer.w.t());
            if i > 0 {
                // `input` is the activation output of layer i - 1.
                self.activation.backprop(input, &mut prev);
            }
            grads.push(Dense { w: gw, b: gb });
            delta = prev;
        }
        grads.reverse();
        Ok((Grads { layers: grads }, delta))
    }

    /// `self = (1 - tau) * self + tau * other`.
    pub fn lerp_from(&mut self, other: &Mlp, tau: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            ndarray::Zip::from(&mut a.w)
                .and(&b.w)
                .for_each(|x, &y| *x = (1.0 - tau) * *x + tau * y);
            ndarray::Zip::from(&mut a.b)
                .and(&b.b)
                .for_each(|x, &y| *x = (1.0 - tau) * *x + tau * y);
        }
    }
}

/// Relative error `|a - b| / max(|a| + |b|, floor)` over whole vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-12)
}
