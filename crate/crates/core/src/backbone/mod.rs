//! Multi-exit layered policies.
//!
//! A [`LayerTappedPolicy`] exposes an action prediction at each eligible backbone layer
//! ("tap") through a cursor that only ever moves deeper, so a prediction at layer `i`
//! never depends on layers after `i`. Two implementations ship: the trainable
//! [`ToyPolicy`] and the analytic [`OracleLayeredPolicy`].

mod oracle;
mod toy;
mod train;

pub use oracle::{MixtureMap, OracleConfig, OracleCursor, OracleLayeredPolicy};
pub use toy::{
    time_embedding, ActionHead, FmHead, MlpHead, ToyBackbone, ToyCursor, ToyPolicy, ToyPolicyConfig,
};
pub use train::{
    batch_loss_and_grad, fit, sample_exit_layer, train_step, ExitSupervision, LayerChoice,
    TrainPlan, TrainSettings,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowcore::{euler_integrate, ActionChunk};
use crate::numkernel::RngStream;

/// One observation: visual-proxy features, proprioceptive state and an instruction id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub visual: Vec<f64>,
    pub state: Vec<f64>,
    pub instruction: usize,
}

impl Observation {
    /// `visual ++ state ++ one_hot(instruction)`.
    pub fn features(&self, n_instructions: usize) -> Result<Vec<f64>> {
        if self.instruction >= n_instructions {
            return Err(Error::InvalidArgument(format!(
                "instruction {} outside 0..{n_instructions}",
                self.instruction
            )));
        }
        let mut f = Vec::with_capacity(self.visual.len() + self.state.len() + n_instructions);
        f.extend_from_slice(&self.visual);
        f.extend_from_slice(&self.state);
        f.extend((0..n_instructions).map(|k| if k == self.instruction { 1.0 } else { 0.0 }));
        Ok(f)
    }

    /// Copy with the state block zeroed (state-mask augmentation).
    pub fn with_masked_state(&self) -> Observation {
        Observation {
            state: vec![0.0; self.state.len()],
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Regression head supervised with L1.
    Mlp,
    /// Flow-matching head sampled by Euler integration.
    Fm,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Mlp => "mlp",
            HeadKind::Fm => "fm",
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How per-tap chunks are produced during layered inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "head", rename_all = "kebab-case")]
pub enum HeadProtocol {
    Mlp,
    /// `n_steps` Euler steps per tap; with `warm_start` each tap after the first starts
    /// from the previous tap's output instead of fresh noise.
    Fm {
        n_steps: usize,
        warm_start: bool,
    },
}

impl HeadProtocol {
    pub fn kind(self) -> HeadKind {
        match self {
            HeadProtocol::Mlp => HeadKind::Mlp,
            HeadProtocol::Fm { .. } => HeadKind::Fm,
        }
    }

    pub fn n_steps(self) -> usize {
        match self {
            HeadProtocol::Mlp => 0,
            HeadProtocol::Fm { n_steps, .. } => n_steps,
        }
    }

    pub fn warm_start(self) -> bool {
        matches!(
            self,
            HeadProtocol::Fm {
                warm_start: true,
                ..
            }
        )
    }

    pub fn validate(self) -> Result<()> {
        match self {
            HeadProtocol::Fm { n_steps: 0, .. } => Err(Error::InvalidArgument(
                "flow-matching protocol needs n_steps ≥ 1".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// A model exposing an action prediction at each eligible layer.
///
/// Implementations must be deterministic: the same observation, layer sequence and
/// inputs give bit-identical outputs.
pub trait LayerTappedPolicy: Sync {
    type Cursor: Clone + Send;

    fn num_layers(&self) -> usize;
    fn eligible_taps(&self) -> &[usize];
    fn chunk_shape(&self) -> (usize, usize);
    fn supports(&self, head: HeadKind) -> bool;

    /// Cursor positioned before the first backbone layer.
    fn begin(&self, obs: &Observation) -> Result<Self::Cursor>;
    fn cursor_layer(&self, cursor: &Self::Cursor) -> usize;
    /// Runs the backbone forward up to and including `layer`.
    fn advance(&self, cursor: &mut Self::Cursor, layer: usize) -> Result<()>;
    /// Regression-head prediction at the cursor's layer.
    fn regress(&self, cursor: &Self::Cursor) -> Result<ActionChunk>;
    /// Flow-matching velocity at the cursor's layer for flattened chunk `x` at time `tau`.
    fn velocity(&self, cursor: &Self::Cursor, x: &[f64], tau: f64) -> Result<Vec<f64>>;

    fn check_tap(&self, layer: usize) -> Result<()> {
        if self.eligible_taps().contains(&layer) {
            Ok(())
        } else {
            Err(Error::IneligibleLayer(layer))
        }
    }
}

/// Every `stride`-th layer, always including the last one.
pub fn strided_taps(layers: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut taps: Vec<usize> = (1..=layers).filter(|l| l % stride == 0).collect();
    if taps.last() != Some(&layers) {
        taps.push(layers);
    }
    taps
}

/// Euler-integrates the policy's field at the cursor's layer starting from `init`.
pub fn integrate_at_cursor<P: LayerTappedPolicy>(
    policy: &P,
    cursor: &P::Cursor,
    init: &ActionChunk,
    n_steps: usize,
) -> Result<ActionChunk> {
    let (h, d) = policy.chunk_shape();
    if init.shape() != (h, d) {
        return Err(Error::DimensionMismatch {
            context: "flow-matching initial chunk",
            expected: h * d,
            actual: init.len(),
        });
    }
    let field = |x: &[f64], tau: f64| policy.velocity(cursor, x, tau);
    let out = euler_integrate(&FallibleField(&field), init.as_slice(), n_steps)?;
    ActionChunk::new(h, d, out)
}

struct FallibleField<'a, F>(&'a F);

impl<F> crate::flowcore::VectorField for FallibleField<'_, F>
where
    F: Fn(&[f64], f64) -> Result<Vec<f64>>,
{
    fn velocity(&self, x: &[f64], tau: f64) -> Result<Vec<f64>> {
        (self.0)(x, tau)
    }
}

/// Prediction of a single tap.
///
/// For [`HeadKind::Fm`] the head's field is integrated from `init` over `n_steps`;
/// `init` is required and ignored for [`HeadKind::Mlp`].
pub fn action_at_layer<P: LayerTappedPolicy>(
    policy: &P,
    obs: &Observation,
    layer: usize,
    head: HeadKind,
    n_steps: usize,
    init: Option<&ActionChunk>,
) -> Result<ActionChunk> {
    policy.check_tap(layer)?;
    if !policy.supports(head) {
        return Err(Error::UnsupportedHead(head.name()));
    }
    let mut cursor = policy.begin(obs)?;
    policy.advance(&mut cursor, layer)?;
    match head {
        HeadKind::Mlp => policy.regress(&cursor),
        HeadKind::Fm => {
            let init = init.ok_or_else(|| {
                Error::InvalidArgument("flow-matching head needs an initial chunk".into())
            })?;
            integrate_at_cursor(policy, &cursor, init, n_steps)
        }
    }
}

/// Produces successive tap predictions for one episode under a [`HeadProtocol`],
/// counting the work done. Shared by calibration and the runtime engines so both
/// see identical chunks and consume noise identically.
pub struct TapChain<'p, P: LayerTappedPolicy> {
    policy: &'p P,
    cursor: P::Cursor,
    protocol: HeadProtocol,
    stream: RngStream,
    previous: Option<ActionChunk>,
    taps_visited: usize,
    head_evals: usize,
    denoising_steps: usize,
}

impl<'p, P: LayerTappedPolicy> TapChain<'p, P> {
    pub fn new(
        policy: &'p P,
        obs: &Observation,
        protocol: HeadProtocol,
        stream: RngStream,
    ) -> Result<Self> {
        protocol.validate()?;
        if !policy.supports(protocol.kind()) {
            return Err(Error::UnsupportedHead(protocol.kind().name()));
        }
        Ok(Self {
            policy,
            cursor: policy.begin(obs)?,
            protocol,
            stream,
            previous: None,
            taps_visited: 0,
            head_evals: 0,
            denoising_steps: 0,
        })
    }

    /// Advances to `layer` and returns that tap's chunk.
    pub fn next_tap(&mut self, layer: usize) -> Result<ActionChunk> {
        self.policy.advance(&mut self.cursor, layer)?;
        let chunk = match self.protocol {
            HeadProtocol::Mlp => {
                self.head_evals += 1;
                self.policy.regress(&self.cursor)?
            }
            HeadProtocol::Fm {
                n_steps,
                warm_start,
            } => {
                let init = match (&self.previous, warm_start) {
                    (Some(prev), true) => prev.clone(),
                    _ => {
                        let (h, d) = self.policy.chunk_shape();
                        ActionChunk::noise(h, d, &mut self.stream)
                    }
                };
                self.denoising_steps += n_steps;
                integrate_at_cursor(self.policy, &self.cursor, &init, n_steps)?
            }
        };
        self.taps_visited += 1;
        self.previous = Some(chunk.clone());
        Ok(chunk)
    }

    pub fn layers_run(&self) -> usize {
        self.policy.cursor_layer(&self.cursor)
    }

    pub fn taps_visited(&self) -> usize {
        self.taps_visited
    }

    pub fn head_evals(&self) -> usize {
        self.head_evals
    }

    pub fn denoising_steps(&self) -> usize {
        self.denoising_steps
    }
}
