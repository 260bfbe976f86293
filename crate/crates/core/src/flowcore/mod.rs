//! Flow-matching mathematics.
//!
//! Time convention: `τ = 0` is pure noise and `τ = 1` is data. The conditional path is
//! `A^τ = τ·A + (1 − τ)·ε` and its target velocity is `d/dτ A^τ = A − ε`, so forward
//! Euler integration from noise at `τ = 0` moves samples toward data at `τ = 1`.

mod mixture;

pub use mixture::{gm_marginal_field, GaussianMixture, MixtureComponent, MixtureField};

use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::numkernel::RngStream;

/// Flow time in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct FlowTime(f64);

impl FlowTime {
    pub const NOISE: FlowTime = FlowTime(0.0);
    pub const DATA: FlowTime = FlowTime(1.0);

    pub fn new(tau: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&tau) {
            Ok(Self(tau))
        } else {
            Err(Error::InvalidArgument(format!(
                "flow time {tau} outside [0, 1]"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// An `H × D` matrix of actions, stored row-major (one row per future step).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    horizon: usize,
    dim: usize,
    values: Vec<f64>,
}

impl ActionChunk {
    pub fn new(horizon: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if horizon == 0 || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "action chunk needs H ≥ 1 and D ≥ 1, got {horizon}×{dim}"
            )));
        }
        ensure_len("action chunk values", horizon * dim, values.len())?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("action chunk entry {i}"),
            });
        }
        Ok(Self {
            horizon,
            dim,
            values,
        })
    }

    pub fn zeros(horizon: usize, dim: usize) -> Self {
        Self {
            horizon,
            dim,
            values: vec![0.0; horizon * dim],
        }
    }

    /// Standard-normal chunk drawn from `stream`.
    pub fn noise(horizon: usize, dim: usize, stream: &mut RngStream) -> Self {
        Self {
            horizon,
            dim,
            values: stream.draw_normal(horizon * dim),
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.horizon, self.dim)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, step: usize) -> &[f64] {
        &self.values[step * self.dim..(step + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.dim)
    }

    pub(crate) fn check_same_shape(&self, other: &ActionChunk) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                context: "action chunk shape",
                expected: self.len(),
                actual: other.len(),
            })
        }
    }

    fn zip_map(&self, other: &ActionChunk, f: impl Fn(f64, f64) -> f64) -> Result<ActionChunk> {
        self.check_same_shape(other)?;
        Ok(ActionChunk {
            horizon: self.horizon,
            dim: self.dim,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

/// `A^τ = τ·A + (1 − τ)·ε`
pub fn conditional_path(
    data: &ActionChunk,
    noise: &ActionChunk,
    tau: FlowTime,
) -> Result<ActionChunk> {
    let t = tau.value();
    data.zip_map(noise, |a, e| t * a + (1.0 - t) * e)
}

/// `u = A − ε`, the τ-derivative of [`conditional_path`].
pub fn target_field(data: &ActionChunk, noise: &ActionChunk) -> Result<ActionChunk> {
    data.zip_map(noise, |a, e| a - e)
}

/// Mean squared error over all elements and its gradient with respect to `predicted`.
pub fn cfm_loss(predicted: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    ensure_len("cfm loss", target.len(), predicted.len())?;
    if predicted.is_empty() {
        return Err(Error::InvalidArgument(
            "cfm loss over an empty chunk".into(),
        ));
    }
    let n = predicted.len() as f64;
    let mut loss = 0.0;
    let grad = predicted
        .iter()
        .zip(target)
        .map(|(&p, &u)| {
            let r = p - u;
            loss += r * r;
            2.0 * r / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// Training-time sampler `τ = clamp(1 − b, 0, max)` with `b ~ Beta(α, β)`.
///
/// The default `Beta(1.5, 1)` puts more mass on low (noisy) τ. When one shape parameter
/// is 1 the draw uses the exact inverse CDF; otherwise it falls back to `rand_distr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauSampler {
    pub alpha: f64,
    pub beta: f64,
    pub max: f64,
}

impl Default for TauSampler {
    fn default() -> Self {
        Self {
            alpha: 1.5,
            beta: 1.0,
            max: 0.999,
        }
    }
}

impl TauSampler {
    pub fn validate(&self) -> Result<()> {
        if self.alpha > 0.0 && self.beta > 0.0 && (0.0..=1.0).contains(&self.max) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid tau sampler {self:?}"
            )))
        }
    }

    pub fn sample(&self, stream: &mut RngStream) -> FlowTime {
        let b = if self.beta == 1.0 {
            // CDF x^α
            libm::pow(stream.uniform(), 1.0 / self.alpha)
        } else if self.alpha == 1.0 {
            // CDF 1 − (1 − x)^β
            1.0 - libm::pow(1.0 - stream.uniform(), 1.0 / self.beta)
        } else {
            rand_distr::Beta::new(self.alpha, self.beta)
                .expect("validated shape parameters")
                .sample(stream.as_rng())
        };
        FlowTime((1.0 - b).clamp(0.0, self.max))
    }
}

/// Draws a training flow time with the default sampler.
pub fn sample_tau(stream: &mut RngStream) -> FlowTime {
    TauSampler::default().sample(stream)
}

/// Velocity field `v(x, τ)` over flattened chunks.
pub trait VectorField {
    fn velocity(&self, x: &[f64], tau: f64) -> Result<Vec<f64>>;
}

impl<F> VectorField for F
where
    F: Fn(&[f64], f64) -> Vec<f64>,
{
    fn velocity(&self, x: &[f64], tau: f64) -> Result<Vec<f64>> {
        Ok(self(x, tau))
    }
}

/// Forward Euler from `τ = 0` to `τ = 1` in `n_steps` steps of size `1 / n_steps`:
/// `x_{k+1} = x_k + δ·v(x_k, k·δ)`.
pub fn euler_integrate<V: VectorField + ?Sized>(
    field: &V,
    x0: &[f64],
    n_steps: usize,
) -> Result<Vec<f64>> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument(
            "euler integration needs n_steps ≥ 1".into(),
        ));
    }
    let step_size = 1.0 / n_steps as f64;
    let mut x = x0.to_vec();
    for step in 0..n_steps {
        let tau = step as f64 * step_size;
        let v = field.velocity(&x, tau)?;
        ensure_len("vector field output", x.len(), v.len())?;
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFiniteField { tau, step });
        }
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += step_size * vi;
        }
    }
    Ok(x)
}
