use serde::{Deserialize, Serialize};

use super::VectorField;
use crate::error::{ensure_len, Error, Result};
use crate::numkernel::RngStream;

/// Largest flow time used by [`gm_marginal_field`]; larger inputs are clamped to it.
pub const TAU_CLAMP: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Isotropic standard deviation.
    pub std: f64,
}

/// Mixture of isotropic Gaussians over flattened chunks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    components: Vec<MixtureComponent>,
}

impl GaussianMixture {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidArgument("mixture needs at least one component".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "mixture components need a non-empty mean".into(),
            ));
        }
        for c in &components {
            ensure_len("mixture component mean", dim, c.mean.len())?;
            if !(c.weight > 0.0) || !(c.std > 0.0) || c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "mixture component needs weight > 0, std > 0 and a finite mean (weight {}, std {})",
                    c.weight, c.std
                )));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        Ok(Self { components })
    }

    pub fn single(mean: Vec<f64>, std: f64) -> Result<Self> {
        Self::new(vec![MixtureComponent {
            weight: 1.0,
            mean,
            std,
        }])
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for c in &self.components {
            for (mi, ci) in m.iter_mut().zip(&c.mean) {
                *mi += c.weight * ci;
            }
        }
        m
    }

    /// Row-major `dim × dim` covariance: `Σ_k w_k (s_k² I + μ_k μ_kᵀ) − m mᵀ`.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim();
        let m = self.mean();
        let mut cov = vec![0.0; d * d];
        for c in &self.components {
            for i in 0..d {
                cov[i * d + i] += c.weight * c.std * c.std;
                for j in 0..d {
                    cov[i * d + j] += c.weight * c.mean[i] * c.mean[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= m[i] * m[j];
            }
        }
        cov
    }

    pub fn sample(&self, stream: &mut RngStream) -> Vec<f64> {
        let u = stream.uniform();
        let mut acc = 0.0;
        let mut chosen = &self.components[self.components.len() - 1];
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        chosen
            .mean
            .iter()
            .map(|&m| m + chosen.std * stream.normal())
            .collect()
    }
}

/// Exact marginal velocity `E[x₁ − x₀ | x_τ = x]` for data `x₁ ~ mix` and noise `x₀ ~ N(0, I)`
/// along the path `x_τ = τ x₁ + (1 − τ) x₀`.
///
/// Per component `k` (mean `μ`, std `s`), `(x₁ − x₀, x_τ)` is jointly Gaussian with
/// `x_τ ~ N(τμ, σ²I)`, `σ² = τ²s² + (1 − τ)²`, and `Cov(x₁ − x₀, x_τ) = (τs² − (1 − τ)) I`, so
///
/// `E[x₁ − x₀ | x_τ = x, k] = μ + (τs² − (1 − τ)) / σ² · (x − τμ)`.
///
/// The result mixes these with posterior responsibilities `r_k ∝ w_k N(x; τμ, σ²I)`.
/// `τ ≥ 1 − 1e-9` is clamped to `1 − 1e-9`.
pub fn gm_marginal_field(mix: &GaussianMixture, x: &[f64], tau: f64) -> Vec<f64> {
    let d = mix.dim();
    assert_eq!(x.len(), d, "gm_marginal_field input length");
    let tau = tau.clamp(0.0, TAU_CLAMP);
    let one_minus = 1.0 - tau;

    let mut log_resp = Vec::with_capacity(mix.components.len());
    let mut coeffs = Vec::with_capacity(mix.components.len());
    for c in &mix.components {
        let s2 = c.std * c.std;
        let var = tau * tau * s2 + one_minus * one_minus;
        let sq: f64 = x
            .iter()
            .zip(&c.mean)
            .map(|(xi, mi)| (xi - tau * mi).powi(2))
            .sum();
        log_resp.push(libm::log(c.weight) - 0.5 * d as f64 * libm::log(var) - 0.5 * sq / var);
        coeffs.push((tau * s2 - one_minus) / var);
    }
    let max = log_resp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_resp.iter().map(|l| libm::exp(l - max)).collect();
    let total: f64 = weights.iter().sum();

    let mut v = vec![0.0; d];
    for ((c, w), coeff) in mix.components.iter().zip(&weights).zip(&coeffs) {
        let r = w / total;
        for ((vi, xi), mi) in v.iter_mut().zip(x).zip(&c.mean) {
            *vi += r * (mi + coeff * (xi - tau * mi));
        }
    }
    v
}

/// [`gm_marginal_field`] as a [`VectorField`].
#[derive(Debug, Clone, Copy)]
pub struct MixtureField<'a>(pub &'a GaussianMixture);

impl VectorField for MixtureField<'_> {
    fn velocity(&self, x: &[f64], tau: f64) -> Result<Vec<f64>> {
        ensure_len("mixture field input", self.0.dim(), x.len())?;
        Ok(gm_marginal_field(self.0, x, tau))
    }
}
