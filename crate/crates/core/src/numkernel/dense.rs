use serde::{Deserialize, Serialize};

use super::tensor::{norm, Tensor2};
use super::{Parameterized, RngStream};
use crate::error::{ensure_len, Error, Result};

/// Hidden-layer nonlinearity. The final layer of a [`DenseNet`] is always affine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    /// tanh approximation of GELU.
    GeluApprox,
    Identity,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => libm::tanh(z),
            Activation::GeluApprox => {
                let u = GELU_C * (z + GELU_A * z * z * z);
                0.5 * z * (1.0 + libm::tanh(u))
            }
            Activation::Identity => z,
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = libm::tanh(z);
                1.0 - t * t
            }
            Activation::GeluApprox => {
                let u = GELU_C * (z + GELU_A * z * z * z);
                let t = libm::tanh(u);
                let du = GELU_C * (1.0 + 3.0 * GELU_A * z * z);
                0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * du
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine map `y = W x + b`, with `W` stored as (out × in).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
}

/// Fully connected network. Hidden layers apply `activation`; the output layer is affine.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    widths: Vec<usize>,
    layers: Vec<DenseLayer>,
    activation: Activation,
}

/// Per-layer inputs and pre-activations recorded by [`DenseNet::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseCache {
    widths: Vec<usize>,
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl DenseCache {
    pub fn input(&self) -> &[f64] {
        &self.inputs[0]
    }

    /// Pre-activation and post-activation of every layer, in order.
    pub fn activations(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        let post = self
            .inputs
            .iter()
            .skip(1)
            .chain(std::iter::once(&self.output));
        self.pre
            .iter()
            .zip(post)
            .map(|(p, q)| (p.as_slice(), q.as_slice()))
    }
}

impl DenseNet {
    pub fn zeros(widths: &[usize], activation: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "dense net needs at least two positive widths, got {widths:?}"
            )));
        }
        let layers = widths
            .windows(2)
            .map(|w| DenseLayer {
                weight: Tensor2::zeros(w[1], w[0]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            layers,
            activation,
        })
    }

    /// Weights drawn `N(0, gain² / fan_in)`, biases zero.
    pub fn random(
        widths: &[usize],
        activation: Activation,
        gain: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mut net = Self::zeros(widths, activation)?;
        for layer in &mut net.layers {
            let scale = gain / (layer.weight.cols() as f64).sqrt();
            for w in layer.weight.data_mut() {
                *w = scale * rng.normal();
            }
        }
        Ok(net)
    }

    pub fn from_layers(layers: Vec<DenseLayer>, activation: Activation) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::InvalidArgument("dense net needs at least one layer".into()))?;
        let mut widths = vec![first.weight.cols()];
        for layer in &layers {
            ensure_len(
                "dense layer input width",
                *widths.last().unwrap(),
                layer.weight.cols(),
            )?;
            ensure_len("dense layer bias", layer.weight.rows(), layer.bias.len())?;
            widths.push(layer.weight.rows());
        }
        Ok(Self {
            widths,
            layers,
            activation,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.widths, self.activation).expect("widths already validated")
    }

    /// Multiplies the output layer's weights and biases by `factor`.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let last = self.layers.last_mut().unwrap();
        last.weight.data_mut().iter_mut().for_each(|w| *w *= factor);
        last.bias.iter_mut().for_each(|b| *b *= factor);
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, DenseCache)> {
        ensure_len("dense forward input", self.input_width(), x.len())?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut current = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; layer.weight.rows()];
            layer.weight.matvec(&current, &mut z);
            for (zi, bi) in z.iter_mut().zip(&layer.bias) {
                *zi += bi;
            }
            let act = if l + 1 == n {
                Activation::Identity
            } else {
                self.activation
            };
            let a: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
            inputs.push(std::mem::replace(&mut current, a));
            pre.push(z);
        }
        let cache = DenseCache {
            widths: self.widths.clone(),
            inputs,
            pre,
            output: current.clone(),
        };
        Ok((current, cache))
    }

    /// Forward pass without recording a cache.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_len("dense forward input", self.input_width(), x.len())?;
        let n = self.layers.len();
        let mut current = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; layer.weight.rows()];
            layer.weight.matvec(&current, &mut z);
            let act = if l + 1 == n {
                Activation::Identity
            } else {
                self.activation
            };
            for (zi, bi) in z.iter_mut().zip(&layer.bias) {
                *zi = act.apply(*zi + bi);
            }
            current = z;
        }
        Ok(current)
    }

    /// Gradients of a scalar loss whose gradient at the output is `upstream`.
    /// Returns `(parameter gradients, input gradient)`.
    pub fn backward(&self, cache: &DenseCache, upstream: &[f64]) -> Result<(DenseNet, Vec<f64>)> {
        let mut grads = self.zeros_like();
        let dx = self.backward_into(cache, upstream, &mut grads)?;
        Ok((grads, dx))
    }

    /// Like [`backward`](Self::backward) but accumulates parameter gradients into `grads`.
    pub fn backward_into(
        &self,
        cache: &DenseCache,
        upstream: &[f64],
        grads: &mut DenseNet,
    ) -> Result<Vec<f64>> {
        if cache.widths != self.widths || grads.widths != self.widths {
            return Err(Error::CacheMismatch);
        }
        ensure_len(
            "dense backward upstream",
            self.output_width(),
            upstream.len(),
        )?;
        let n = self.layers.len();
        let mut g = upstream.to_vec();
        for l in (0..n).rev() {
            let act = if l + 1 == n {
                Activation::Identity
            } else {
                self.activation
            };
            if act != Activation::Identity {
                for (gi, &z) in g.iter_mut().zip(&cache.pre[l]) {
                    *gi *= act.derivative(z);
                }
            }
            let gl = &mut grads.layers[l];
            gl.weight.add_outer(&g, &cache.inputs[l]);
            for (b, gi) in gl.bias.iter_mut().zip(&g) {
                *b += gi;
            }
            let mut down = vec![0.0; self.widths[l]];
            self.layers[l].weight.matvec_t_acc(&g, &mut down);
            g = down;
        }
        Ok(g)
    }

    /// Upper bound on `‖f(x)‖₂` given `‖x‖₂ ≤ input_norm`.
    ///
    /// Uses `‖Wx + b‖ ≤ ‖W‖_F ‖x‖ + ‖b‖` and `|φ(z)| ≤ |z|` for every supported activation.
    pub fn output_norm_bound(&self, input_norm: f64) -> f64 {
        self.layers.iter().fold(input_norm, |acc, layer| {
            layer.weight.frobenius_norm() * acc + norm(&layer.bias)
        })
    }
}

impl Parameterized for DenseNet {
    fn for_each_block(&self, f: &mut dyn FnMut(&[f64])) {
        for layer in &self.layers {
            f(layer.weight.data());
            f(&layer.bias);
        }
    }

    fn for_each_block_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for layer in &mut self.layers {
            f(layer.weight.data_mut());
            f(&mut layer.bias);
        }
    }
}
