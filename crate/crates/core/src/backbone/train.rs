use serde::{Deserialize, Serialize};

use super::toy::FmHead;
use super::{HeadKind, LayerTappedPolicy, Observation, ToyPolicy};
use crate::error::{ensure_len, Error, Result};
use crate::flowcore::{cfm_loss, conditional_path, target_field, ActionChunk, TauSampler};
use crate::numkernel::{OptState, Parameterized, RngStream};

/// Which layers receive supervision in a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitSupervision {
    /// One tap drawn uniformly per batch.
    RandomExit,
    /// Every tap, equally weighted (loss is the mean over taps).
    AllExits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub head: HeadKind,
    pub mode: ExitSupervision,
    /// Probability of zeroing an observation's state block.
    pub state_mask_prob: f64,
    pub tau: TauSampler,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            head: HeadKind::Mlp,
            mode: ExitSupervision::RandomExit,
            state_mask_prob: 0.0,
            tau: TauSampler::default(),
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.state_mask_prob) {
            return Err(Error::InvalidArgument(format!(
                "state_mask_prob {} outside [0, 1]",
                self.state_mask_prob
            )));
        }
        self.tau.validate()
    }
}

/// Layers supervised by one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerChoice {
    Single(usize),
    All,
}

impl LayerChoice {
    fn resolve(&self, policy: &ToyPolicy) -> Result<Vec<usize>> {
        match self {
            LayerChoice::Single(l) => {
                policy.check_tap(*l)?;
                Ok(vec![*l])
            }
            LayerChoice::All => Ok(policy.eligible_taps().to_vec()),
        }
    }
}

fn l1_loss(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &a)| {
            let r = p - a;
            loss += r.abs();
            if r > 0.0 {
                1.0 / n
            } else if r < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    (loss / n, grad)
}

/// Mean loss over the batch (and over `layers`) with its gradient.
///
/// Random draws per sample, in order: one uniform for the state mask, then for each
/// supervised layer (flow-matching head only) the noise chunk followed by τ.
pub fn batch_loss_and_grad(
    policy: &ToyPolicy,
    batch: &[(Observation, ActionChunk)],
    layers: &LayerChoice,
    settings: &TrainSettings,
    stream: &mut RngStream,
) -> Result<(f64, ToyPolicy)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let layers = layers.resolve(policy)?;
    policy.head(settings.head)?;
    let (horizon, dim) = policy.chunk_shape();
    let depth = *layers.iter().max().unwrap();
    let weight = 1.0 / (batch.len() * layers.len()) as f64;

    let mut grads = policy.zeros_like();
    let mut per_layer = vec![0.0; layers.len()];
    for (obs, target) in batch {
        ensure_len("training target", horizon * dim, target.len())?;
        let masked = stream.bernoulli(settings.state_mask_prob) && settings.state_mask_prob > 0.0;
        let features = if masked {
            policy.features(&obs.with_masked_state())?
        } else {
            policy.features(obs)?
        };
        let cache = policy.backbone.forward_cached(&features, depth)?;
        let mut dh: Vec<Vec<f64>> = cache.hidden.iter().map(|h| vec![0.0; h.len()]).collect();
        for (slot, &layer) in layers.iter().enumerate() {
            let h = &cache.hidden[layer];
            let (loss, dhl) = match settings.head {
                HeadKind::Mlp => {
                    let net = &policy.mlp.as_ref().unwrap().net;
                    let (pred, head_cache) = net.forward(h)?;
                    let (loss, g) = l1_loss(&pred, target.as_slice());
                    let g: Vec<f64> = g.iter().map(|v| v * weight).collect();
                    let dhl =
                        net.backward_into(&head_cache, &g, &mut grads.mlp.as_mut().unwrap().net)?;
                    (loss, dhl)
                }
                HeadKind::Fm => {
                    let head: &FmHead = policy.fm.as_ref().unwrap();
                    let noise = ActionChunk::noise(horizon, dim, stream);
                    let tau = settings.tau.sample(stream);
                    let x = conditional_path(target, &noise, tau)?;
                    let u = target_field(target, &noise)?;
                    let (v, head_cache) = head.forward(h, x.as_slice(), tau.value(), layer)?;
                    let (loss, g) = cfm_loss(&v, u.as_slice())?;
                    let g: Vec<f64> = g.iter().map(|v| v * weight).collect();
                    let dhl = head.backward(&head_cache, &g, grads.fm.as_mut().unwrap())?;
                    (loss, dhl)
                }
            };
            per_layer[slot] += loss;
            dh[layer].iter_mut().zip(&dhl).for_each(|(a, b)| *a += b);
        }
        policy.backbone.backward(&cache, &dh, &mut grads.backbone)?;
    }
    for (slot, &total) in per_layer.iter().enumerate() {
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                layer: layers[slot],
                batch: batch.len(),
            });
        }
    }
    let loss = per_layer.iter().sum::<f64>() * weight;
    Ok((loss, grads))
}

/// Tap supervised by a random-exit step: uniform over the eligible taps.
pub fn sample_exit_layer<P: LayerTappedPolicy>(policy: &P, stream: &mut RngStream) -> usize {
    let taps = policy.eligible_taps();
    taps[stream.below(taps.len())]
}

/// One optimizer step. Returns the batch loss before the update.
///
/// In random-exit mode the tap is drawn from `stream` before any per-sample draws.
pub fn train_step(
    policy: &mut ToyPolicy,
    batch: &[(Observation, ActionChunk)],
    settings: &TrainSettings,
    opt: &mut OptState,
    stream: &mut RngStream,
) -> Result<f64> {
    settings.validate()?;
    let choice = match settings.mode {
        ExitSupervision::RandomExit => LayerChoice::Single(sample_exit_layer(policy, stream)),
        ExitSupervision::AllExits => LayerChoice::All,
    };
    let (loss, grads) = batch_loss_and_grad(policy, batch, &choice, settings, stream)?;
    let mut params = policy.to_flat();
    opt.step(&mut params, &grads.to_flat())?;
    policy.load_flat(&params)?;
    Ok(loss)
}

/// Length and batching of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub steps: u64,
    pub batch_size: usize,
    pub settings: TrainSettings,
}

/// Trains until the optimizer has taken `plan.steps` steps, so an interrupted run resumes
/// from a restored `(policy, opt, stream)` triple. Each step draws `batch_size` indices
/// uniformly with replacement, then calls [`train_step`]. Returns the losses of the steps
/// taken by this call.
pub fn fit(
    policy: &mut ToyPolicy,
    data: &[(Observation, ActionChunk)],
    plan: &TrainPlan,
    opt: &mut OptState,
    stream: &mut RngStream,
    mut on_step: impl FnMut(u64, f64),
) -> Result<Vec<f64>> {
    if data.is_empty() || plan.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "training needs data and a positive batch size".into(),
        ));
    }
    let mut losses = Vec::new();
    let mut batch = Vec::with_capacity(plan.batch_size);
    while opt.step_count() < plan.steps {
        batch.clear();
        for _ in 0..plan.batch_size {
            batch.push(data[stream.below(data.len())].clone());
        }
        let loss = train_step(policy, &batch, &plan.settings, opt, stream)?;
        on_step(opt.step_count(), loss);
        losses.push(loss);
    }
    Ok(losses)
}
