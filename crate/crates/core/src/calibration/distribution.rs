use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitFamily {
    /// `p_k ∝ c^k`.
    Exponential,
    /// `p_k ∝ exp(−(k − c)² / 2σ²)`.
    Gaussian,
    /// `p_k ∝ GammaPDF(k; shape = c, scale)`.
    Gamma,
}

impl ExitFamily {
    pub fn name(self) -> &'static str {
        match self {
            ExitFamily::Exponential => "exponential",
            ExitFamily::Gaussian => "gaussian",
            ExitFamily::Gamma => "gamma",
        }
    }
}

/// Target exit fractions `p_1..p_K` over the exit taps, summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitDistribution {
    /// `None` for hand-specified probabilities.
    pub family: Option<ExitFamily>,
    pub c: f64,
    /// σ for the Gaussian family, scale for Gamma; unused otherwise.
    pub spread: f64,
    probabilities: Vec<f64>,
}

/// Members of `family` evaluated at `k = 1..=K` and normalized.
///
/// `extra` is σ (Gaussian) or the scale (Gamma) and defaults to 1. Computation happens in
/// log space so long tails do not underflow before normalization.
pub fn exit_distribution(
    family: ExitFamily,
    c: f64,
    k: usize,
    extra: Option<f64>,
) -> Result<ExitDistribution> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "exit criterion c must be > 0, got {c}"
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument(
            "exit distribution needs K ≥ 1".into(),
        ));
    }
    let spread = extra.unwrap_or(1.0);
    if family != ExitFamily::Exponential && !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "{} exit distribution needs a positive spread, got {spread}",
            family.name()
        )));
    }
    let log_weights: Vec<f64> = (1..=k)
        .map(|i| {
            let x = i as f64;
            match family {
                ExitFamily::Exponential => x * libm::log(c),
                ExitFamily::Gaussian => -(x - c) * (x - c) / (2.0 * spread * spread),
                ExitFamily::Gamma => (c - 1.0) * libm::log(x) - x / spread,
            }
        })
        .collect();
    let max = log_weights
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_weights.iter().map(|l| libm::exp(l - max)).collect();
    let total: f64 = weights.iter().sum();
    Ok(ExitDistribution {
        family: Some(family),
        c,
        spread,
        probabilities: weights.into_iter().map(|w| w / total).collect(),
    })
}

impl ExitDistribution {
    /// Explicit probabilities; entries must be ≥ 0 and sum to 1 within 1e-9.
    pub fn from_probabilities(probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.is_empty() || probabilities.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidArgument(
                "exit probabilities must be non-empty, finite and ≥ 0".into(),
            ));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "exit probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self {
            family: None,
            c: f64::NAN,
            spread: f64::NAN,
            probabilities,
        })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }
}
