use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{strided_taps, HeadKind, LayerTappedPolicy, Observation};
use crate::error::{ensure_len, Error, Result};
use crate::flowcore::{gm_marginal_field, ActionChunk, GaussianMixture};
use crate::numkernel::RngStream;

/// Observation → target mixture over flattened chunks.
pub type MixtureMap = Arc<dyn Fn(&Observation) -> Result<GaussianMixture> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub layers: usize,
    pub tap_stride: usize,
    pub horizon: usize,
    pub action_dim: usize,
    /// Fidelity decay γ; layer `i` is perturbed by `ζ γ^i`.
    pub decay: f64,
    /// Perturbation scale ζ.
    pub scale: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            layers: 28,
            tap_stride: 2,
            horizon: 8,
            action_dim: 2,
            decay: 0.5,
            scale: 1.0,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 || self.tap_stride == 0 || self.horizon == 0 || self.action_dim == 0 {
            return Err(Error::InvalidArgument(
                "oracle needs layers, tap_stride, horizon and action_dim ≥ 1".into(),
            ));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "oracle decay {} outside (0, 1)",
                self.decay
            )));
        }
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "oracle scale {} must be ≥ 0",
                self.scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Perturbation {
    freq: Vec<f64>,
    phase: Vec<f64>,
}

impl Perturbation {
    fn new(dim: usize, stream: &mut RngStream) -> Self {
        let freq = (0..dim).map(|_| 0.5 + 1.5 * stream.uniform()).collect();
        let phase = (0..dim)
            .map(|_| 2.0 * std::f64::consts::PI * stream.uniform())
            .collect();
        Self { freq, phase }
    }

    fn eval<'a>(&'a self, x: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        x.iter()
            .zip(&self.freq)
            .zip(&self.phase)
            .map(|((xi, f), p)| libm::sin(f * xi + p))
    }
}

/// Analytic layered policy with a known target distribution.
///
/// Layer `i` uses the exact mixture field plus `ζ γ^i g_i(x)`, where
/// `g_i(x)_d = sin(f_{i,d} x_d + φ_{i,d})` with seeded frequencies in `[0.5, 2]`.
/// The regression head returns the mixture mean perturbed the same way.
#[derive(Clone)]
pub struct OracleLayeredPolicy {
    config: OracleConfig,
    taps: Vec<usize>,
    map: MixtureMap,
    perturbations: Vec<Perturbation>,
}

impl std::fmt::Debug for OracleLayeredPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OracleLayeredPolicy")
            .field("config", &self.config)
            .field("taps", &self.taps)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub struct OracleCursor {
    layer: usize,
    mixture: Arc<GaussianMixture>,
}

impl OracleCursor {
    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }
}

impl OracleLayeredPolicy {
    pub fn new(config: OracleConfig, map: MixtureMap) -> Result<Self> {
        config.validate()?;
        let dim = config.horizon * config.action_dim;
        let root = RngStream::new(config.seed);
        let perturbations = (1..=config.layers)
            .map(|i| Perturbation::new(dim, &mut root.fork(i as u64)))
            .collect();
        Ok(Self {
            taps: strided_taps(config.layers, config.tap_stride),
            config,
            map,
            perturbations,
        })
    }

    /// Oracle whose target distribution ignores the observation.
    pub fn with_fixed_mixture(config: OracleConfig, mixture: GaussianMixture) -> Result<Self> {
        let shared = Arc::new(mixture);
        Self::new(
            config,
            Arc::new(move |_: &Observation| Ok((*shared).clone())),
        )
    }

    pub fn config(&self) -> &OracleConfig {
        &self.config
    }

    /// Replaces the default strided tap set.
    pub fn with_taps(mut self, taps: Vec<usize>) -> Result<Self> {
        if taps.is_empty() || taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "taps must be non-empty and strictly increasing".into(),
            ));
        }
        if taps[0] == 0 || *taps.last().unwrap() > self.config.layers {
            return Err(Error::InvalidArgument(format!(
                "taps must lie in 1..={}",
                self.config.layers
            )));
        }
        self.taps = taps;
        Ok(self)
    }

    pub fn mixture(&self, obs: &Observation) -> Result<GaussianMixture> {
        let mix = (self.map)(obs)?;
        ensure_len(
            "oracle mixture dimension",
            self.config.horizon * self.config.action_dim,
            mix.dim(),
        )?;
        Ok(mix)
    }

    fn amplitude(&self, layer: usize) -> f64 {
        self.config.scale * libm::pow(self.config.decay, layer as f64)
    }

    /// `ζ γ^i g_i(x)`; zero at layer 0.
    pub fn perturbation(&self, layer: usize, x: &[f64]) -> Vec<f64> {
        if layer == 0 || self.config.scale == 0.0 {
            return vec![0.0; x.len()];
        }
        let a = self.amplitude(layer);
        self.perturbations[layer - 1]
            .eval(x)
            .map(|g| a * g)
            .collect()
    }
}

impl LayerTappedPolicy for OracleLayeredPolicy {
    type Cursor = OracleCursor;

    fn num_layers(&self) -> usize {
        self.config.layers
    }

    fn eligible_taps(&self) -> &[usize] {
        &self.taps
    }

    fn chunk_shape(&self) -> (usize, usize) {
        (self.config.horizon, self.config.action_dim)
    }

    fn supports(&self, _head: HeadKind) -> bool {
        true
    }

    fn begin(&self, obs: &Observation) -> Result<OracleCursor> {
        Ok(OracleCursor {
            layer: 0,
            mixture: Arc::new(self.mixture(obs)?),
        })
    }

    fn cursor_layer(&self, cursor: &OracleCursor) -> usize {
        cursor.layer
    }

    fn advance(&self, cursor: &mut OracleCursor, layer: usize) -> Result<()> {
        if layer < cursor.layer {
            return Err(Error::CursorRewind {
                current: cursor.layer,
                requested: layer,
            });
        }
        if layer > self.config.layers {
            return Err(Error::LayerOutOfRange {
                layer,
                max: self.config.layers,
            });
        }
        cursor.layer = layer;
        Ok(())
    }

    fn regress(&self, cursor: &OracleCursor) -> Result<ActionChunk> {
        let mean = cursor.mixture.mean();
        let p = self.perturbation(cursor.layer, &mean);
        let values = mean.iter().zip(&p).map(|(m, d)| m + d).collect();
        ActionChunk::new(self.config.horizon, self.config.action_dim, values)
    }

    fn velocity(&self, cursor: &OracleCursor, x: &[f64], tau: f64) -> Result<Vec<f64>> {
        ensure_len("oracle field input", cursor.mixture.dim(), x.len())?;
        let mut v = gm_marginal_field(&cursor.mixture, x, tau);
        if self.config.scale != 0.0 && cursor.layer > 0 {
            let a = self.amplitude(cursor.layer);
            for (vi, g) in v
                .iter_mut()
                .zip(self.perturbations[cursor.layer - 1].eval(x))
            {
                *vi += a * g;
            }
        }
        Ok(v)
    }
}
