use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::{MixtureMap, Observation};
use crate::error::{Error, Result};
use crate::flowcore::{ActionChunk, GaussianMixture, MixtureComponent};
use crate::numkernel::RngStream;

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample(&self, stream: &mut RngStream) -> f64 {
        self.lo + (self.hi - self.lo) * stream.uniform()
    }

    fn valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi
    }
}

/// Axis-aligned sampling box in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2 {
    pub x: Interval,
    pub y: Interval,
}

/// Planar reaching task: move from the origin to one of two objects along one of two
/// mirror-image arcs.
///
/// Observations carry `[object.x, object.y, distractor.x, distractor.y]` as visual
/// features, a nuisance state vector and an instruction bit; instruction 0 targets the
/// object and 1 the distractor. The arc bulges to the left of the origin→target line
/// (mode `true`, probability `arc_mode_probability`) or to the right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub horizon: usize,
    pub action_dim: usize,
    pub object_box: Box2,
    pub distractor_box: Box2,
    pub state_dim: usize,
    pub state_range: Interval,
    /// Peak sideways offset of the arc as a fraction of the target distance.
    pub arc_bulge: f64,
    pub arc_mode_probability: f64,
    pub endpoint_radius: f64,
    pub tube_radius: f64,
    pub train_size: usize,
    pub calibration_size: usize,
    pub eval_size: usize,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        let reach = Box2 {
            x: Interval::new(0.5, 1.5),
            y: Interval::new(-1.0, 1.0),
        };
        Self {
            horizon: 8,
            action_dim: 2,
            object_box: reach,
            distractor_box: reach,
            state_dim: 3,
            state_range: Interval::new(-1.0, 1.0),
            arc_bulge: 0.3,
            arc_mode_probability: 0.75,
            endpoint_radius: 0.05,
            tube_radius: 0.05,
            train_size: 4096,
            calibration_size: 2000,
            eval_size: 2000,
        }
    }
}

/// Samples per arc used to measure distance to the curve.
const ARC_RESOLUTION: usize = 256;

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.horizon == 0 {
            problems.push("horizon must be ≥ 1".to_string());
        }
        if self.action_dim != 2 {
            problems.push(format!(
                "action_dim must be 2 (planar task), got {}",
                self.action_dim
            ));
        }
        for (name, b) in [
            ("object_box", &self.object_box),
            ("distractor_box", &self.distractor_box),
        ] {
            if !b.x.valid() || !b.y.valid() {
                problems.push(format!("{name} is degenerate"));
            }
        }
        if !self.state_range.valid() {
            problems.push("state_range is degenerate".into());
        }
        if !(self.arc_bulge > 0.0 && self.arc_bulge.is_finite()) {
            problems.push("arc_bulge must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.arc_mode_probability) {
            problems.push("arc_mode_probability must lie in [0, 1]".into());
        }
        if !(self.endpoint_radius > 0.0) || !(self.tube_radius > 0.0) {
            problems.push("tolerances must be > 0".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "task spec: {}",
                problems.join("; ")
            )))
        }
    }

    /// Target position selected by the observation's instruction.
    pub fn target(&self, obs: &Observation) -> [f64; 2] {
        let base = if obs.instruction == 0 { 0 } else { 2 };
        [obs.visual[base], obs.visual[base + 1]]
    }

    /// Waypoint at path fraction `s ∈ [0, 1]`.
    pub fn arc_point(&self, target: [f64; 2], mode: bool, s: f64) -> [f64; 2] {
        let sign = if mode { 1.0 } else { -1.0 };
        let side = sign * self.arc_bulge * libm::sin(std::f64::consts::PI * s);
        [
            s * target[0] - side * target[1],
            s * target[1] + side * target[0],
        ]
    }

    /// The chunk of `horizon` waypoints at `s = 1/H, 2/H, …, 1`.
    pub fn arc_chunk(&self, target: [f64; 2], mode: bool) -> ActionChunk {
        let values = (1..=self.horizon)
            .flat_map(|j| self.arc_point(target, mode, j as f64 / self.horizon as f64))
            .collect();
        ActionChunk::new(self.horizon, 2, values).expect("arc chunk is well-formed")
    }

    fn distance_to_arc(&self, p: &[f64], target: [f64; 2], mode: bool) -> f64 {
        let mut best = f64::INFINITY;
        let mut a = self.arc_point(target, mode, 0.0);
        for j in 1..=ARC_RESOLUTION {
            let b = self.arc_point(target, mode, j as f64 / ARC_RESOLUTION as f64);
            best = best.min(point_segment_distance(p, a, b));
            a = b;
        }
        best
    }
}

fn point_segment_distance(p: &[f64], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (ex, ey) = (p[0] - a[0] - t * dx, p[1] - a[1] - t * dy);
    (ex * ex + ey * ey).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub observation: Observation,
    pub mode: bool,
    pub chunk: ActionChunk,
}

impl Episode {
    pub fn training_pair(&self) -> (Observation, ActionChunk) {
        (self.observation.clone(), self.chunk.clone())
    }
}

/// One episode from its own stream. Draw order: object (x, y), distractor (x, y),
/// state, instruction, mode.
pub fn sample_episode(spec: &SyntheticTaskSpec, stream: &mut RngStream) -> Episode {
    let visual = vec![
        spec.object_box.x.sample(stream),
        spec.object_box.y.sample(stream),
        spec.distractor_box.x.sample(stream),
        spec.distractor_box.y.sample(stream),
    ];
    let state = (0..spec.state_dim)
        .map(|_| spec.state_range.sample(stream))
        .collect();
    let instruction = usize::from(stream.uniform() >= 0.5);
    let mode = stream.uniform() < spec.arc_mode_probability;
    let observation = Observation {
        visual,
        state,
        instruction,
    };
    let chunk = spec.arc_chunk(spec.target(&observation), mode);
    Episode {
        observation,
        mode,
        chunk,
    }
}

/// `n` i.i.d. episodes; episode `i` is drawn from `RngStream::new(seed).fork(i)`, so a
/// dataset is a prefix of any larger one with the same seed.
pub fn gen_dataset(spec: &SyntheticTaskSpec, seed: u64, n: usize) -> Result<Vec<Episode>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be ≥ 1".into()));
    }
    let root = RngStream::new(seed);
    Ok((0..n)
        .map(|i| sample_episode(spec, &mut root.fork(i as u64)))
        .collect())
}

/// Endpoint within `endpoint_radius` of the instructed target and every waypoint within
/// `tube_radius` of one of the two valid arcs.
pub fn task_success(pred: &ActionChunk, episode: &Episode, spec: &SyntheticTaskSpec) -> bool {
    if pred.shape() != (spec.horizon, 2) {
        return false;
    }
    let target = spec.target(&episode.observation);
    let end = pred.row(spec.horizon - 1);
    let miss = ((end[0] - target[0]).powi(2) + (end[1] - target[1]).powi(2)).sqrt();
    if !(miss <= spec.endpoint_radius) {
        return false;
    }
    [true, false].into_iter().any(|mode| {
        pred.rows()
            .all(|p| spec.distance_to_arc(p, target, mode) <= spec.tube_radius)
    })
}

/// Mean waypoint distance to the closer of the two valid arc chunks.
pub fn chunk_error(pred: &ActionChunk, episode: &Episode, spec: &SyntheticTaskSpec) -> f64 {
    let target = spec.target(&episode.observation);
    [true, false]
        .into_iter()
        .map(|mode| {
            let arc = spec.arc_chunk(target, mode);
            pred.rows()
                .zip(arc.rows())
                .map(|(p, a)| ((p[0] - a[0]).powi(2) + (p[1] - a[1]).powi(2)).sqrt())
                .sum::<f64>()
                / spec.horizon as f64
        })
        .fold(f64::INFINITY, f64::min)
}

/// Observation-conditioned target distribution of the task: one isotropic component per
/// arc, weighted by the mode probability, each with standard deviation `std`.
pub fn task_mixture_map(spec: &SyntheticTaskSpec, std: f64) -> Result<MixtureMap> {
    spec.validate()?;
    if !(std > 0.0) {
        return Err(Error::InvalidArgument("mixture std must be > 0".into()));
    }
    let spec = spec.clone();
    Ok(Arc::new(move |obs: &Observation| {
        if obs.visual.len() != 4 || obs.instruction > 1 {
            return Err(Error::InvalidArgument(
                "observation does not belong to the task".into(),
            ));
        }
        let target = spec.target(obs);
        let p = spec.arc_mode_probability;
        let components = [(true, p), (false, 1.0 - p)]
            .into_iter()
            .filter(|(_, w)| *w > 0.0)
            .map(|(mode, weight)| MixtureComponent {
                weight,
                mean: spec.arc_chunk(target, mode).into_vec(),
                std,
            })
            .collect();
        GaussianMixture::new(components)
    }))
}
