use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::task::{chunk_error, task_success, Episode, SyntheticTaskSpec};
use crate::backbone::{HeadKind, HeadProtocol, LayerTappedPolicy, OracleLayeredPolicy};
use crate::calibration::ExitSchedule;
use crate::error::{Error, Result};
use crate::flowcore::{euler_integrate, ActionChunk, MixtureField};
use crate::numkernel::RngStream;
use crate::runtime::{episode_stream, infer_early_exit, infer_full, CostModel, InferenceTrace};

/// One benchmark configuration: a head protocol plus an exit schedule, or full depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub id: String,
    pub protocol: HeadProtocol,
    /// `None` runs full-depth inference.
    pub schedule: Option<ExitSchedule>,
    /// Exit-distribution criterion the schedule was calibrated with, if any.
    pub c: Option<f64>,
}

impl BenchConfig {
    pub fn full(protocol: HeadProtocol) -> Self {
        Self {
            id: full_id(protocol),
            protocol,
            schedule: None,
            c: None,
        }
    }

    pub fn early_exit(
        id: impl Into<String>,
        protocol: HeadProtocol,
        schedule: ExitSchedule,
        c: Option<f64>,
    ) -> Self {
        Self {
            id: id.into(),
            protocol,
            schedule: Some(schedule),
            c,
        }
    }

    fn mode(&self) -> &'static str {
        if self.schedule.is_some() {
            "early_exit"
        } else {
            "full"
        }
    }
}

fn full_id(protocol: HeadProtocol) -> String {
    match protocol {
        HeadProtocol::Mlp => "full-mlp".into(),
        HeadProtocol::Fm { n_steps, .. } => format!("full-fm-{n_steps}"),
    }
}

/// Full-depth baselines every report carries (for the heads the policy supports).
pub fn mandatory_baselines() -> Vec<BenchConfig> {
    vec![
        BenchConfig::full(HeadProtocol::Mlp),
        BenchConfig::full(HeadProtocol::Fm {
            n_steps: 10,
            warm_start: false,
        }),
        BenchConfig::full(HeadProtocol::Fm {
            n_steps: 2,
            warm_start: false,
        }),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub config_id: String,
    pub head: HeadKind,
    /// 0 for the regression head.
    pub n_steps: usize,
    pub warm_start: bool,
    /// `full` or `early_exit`.
    pub mode: String,
    pub c: Option<f64>,
    pub episodes: usize,
    pub failures: usize,
    pub success_rate: f64,
    pub mean_chunk_error: f64,
    pub mean_gflops: f64,
    pub mean_backbone_gflops: f64,
    pub mean_exit_layer: f64,
    pub total_denoising_steps: u64,
    /// `100 · (1 − mean cost / full-depth mean cost)` for the same head and step count.
    pub reduction_pct: f64,
    pub backbone_reduction_pct: f64,
    /// First failure message, if any episode failed.
    pub error: Option<String>,
    /// `(exit layer, episode count)` for every possible exit layer, ascending.
    pub histogram: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub spec: SyntheticTaskSpec,
    pub cost: CostModel,
    pub rows: Vec<BenchRow>,
}

struct Outcome {
    success: bool,
    error: f64,
    gflops: f64,
    backbone: f64,
    exit_layer: usize,
    steps: usize,
}

fn run_config<P: LayerTappedPolicy>(
    policy: &P,
    config: &BenchConfig,
    episodes: &[Episode],
    spec: &SyntheticTaskSpec,
    cost: &CostModel,
    root: &RngStream,
) -> BenchRow {
    let results: Vec<Result<Outcome>> = episodes
        .par_iter()
        .enumerate()
        .map(|(n, ep)| {
            let stream = episode_stream(root, n);
            let trace = match &config.schedule {
                Some(s) => {
                    infer_early_exit(policy, &ep.observation, s, config.protocol, cost, stream)
                }
                None => infer_full(policy, &ep.observation, config.protocol, cost, stream),
            }?;
            Ok(Outcome {
                success: task_success(&trace.chunk, ep, spec),
                error: chunk_error(&trace.chunk, ep, spec),
                gflops: trace.gflops,
                backbone: cost.backbone(trace.layers_run),
                exit_layer: trace.exit_layer,
                steps: trace.denoising_steps,
            })
        })
        .collect();

    let exit_layers: Vec<usize> = match &config.schedule {
        Some(s) => s.exit_taps().to_vec(),
        None => vec![policy.num_layers()],
    };
    let mut histogram: Vec<(usize, usize)> = exit_layers.iter().map(|&l| (l, 0)).collect();
    let (mut ok, mut successes, mut failures) = (0usize, 0usize, 0usize);
    let (mut err_sum, mut cost_sum, mut backbone_sum, mut layer_sum) = (0.0, 0.0, 0.0, 0.0);
    let mut steps = 0u64;
    let mut first_error = None;
    // Sequential reduction in episode order keeps the sums bit-reproducible.
    for r in results {
        match r {
            Ok(o) => {
                ok += 1;
                successes += usize::from(o.success);
                err_sum += o.error;
                cost_sum += o.gflops;
                backbone_sum += o.backbone;
                layer_sum += o.exit_layer as f64;
                steps += o.steps as u64;
                if let Some(slot) = histogram.iter_mut().find(|(l, _)| *l == o.exit_layer) {
                    slot.1 += 1;
                }
            }
            Err(e) => {
                failures += 1;
                first_error.get_or_insert_with(|| e.to_string());
            }
        }
    }
    let mean = |s: f64| if ok > 0 { s / ok as f64 } else { f64::NAN };
    BenchRow {
        config_id: config.id.clone(),
        head: config.protocol.kind(),
        n_steps: match config.protocol {
            HeadProtocol::Mlp => 0,
            HeadProtocol::Fm { n_steps, .. } => n_steps,
        },
        warm_start: config.protocol.warm_start(),
        mode: config.mode().into(),
        c: config.c,
        episodes: episodes.len(),
        failures,
        success_rate: mean(successes as f64),
        mean_chunk_error: mean(err_sum),
        mean_gflops: mean(cost_sum),
        mean_backbone_gflops: mean(backbone_sum),
        mean_exit_layer: mean(layer_sum),
        total_denoising_steps: steps,
        reduction_pct: 0.0,
        backbone_reduction_pct: 0.0,
        error: first_error,
        histogram,
    }
}

fn reduction(cost: f64, full: f64) -> f64 {
    if full > 0.0 {
        100.0 * (1.0 - cost / full)
    } else {
        0.0
    }
}

/// Evaluates every configuration on every episode.
///
/// Episode `n` runs on `episode_stream(root, n)` in every configuration, so the rows are
/// paired. Full-depth baselines from [`mandatory_baselines`] are prepended for each
/// supported head unless the grid already has them; an early-exit row's reduction is
/// measured against the full-depth row with the same head and step count (added on
/// demand). Engine failures are counted per row and do not stop the run.
pub fn run_benchmark<P: LayerTappedPolicy>(
    policy: &P,
    configs: &[BenchConfig],
    episodes: &[Episode],
    spec: &SyntheticTaskSpec,
    cost: &CostModel,
    root: &RngStream,
) -> Result<BenchReport> {
    if configs.is_empty() {
        return Err(Error::InvalidArgument("benchmark grid is empty".into()));
    }
    if episodes.is_empty() {
        return Err(Error::InvalidArgument(
            "benchmark needs at least one episode".into(),
        ));
    }
    spec.validate()?;
    cost.validate()?;

    let key = |c: &BenchConfig| (c.protocol.kind(), c.protocol.n_steps());
    let has_full = |list: &[BenchConfig], k: (HeadKind, usize)| {
        list.iter().any(|c| c.schedule.is_none() && key(c) == k)
    };
    let mut grid: Vec<BenchConfig> = Vec::new();
    for base in mandatory_baselines() {
        if policy.supports(base.protocol.kind()) && !has_full(configs, key(&base)) {
            grid.push(base);
        }
    }
    for c in configs {
        if c.schedule.is_some() && !has_full(configs, key(c)) && !has_full(&grid, key(c)) {
            grid.push(BenchConfig::full(c.protocol));
        }
    }
    grid.extend(configs.iter().cloned());

    let mut rows: Vec<BenchRow> = grid
        .iter()
        .map(|c| run_config(policy, c, episodes, spec, cost, root))
        .collect();
    let fulls: Vec<((HeadKind, usize), f64, f64)> = grid
        .iter()
        .zip(&rows)
        .filter(|(c, _)| c.schedule.is_none())
        .map(|(c, r)| (key(c), r.mean_gflops, r.mean_backbone_gflops))
        .collect();
    for (c, row) in grid.iter().zip(rows.iter_mut()) {
        if let Some(&(_, total, backbone)) = fulls.iter().find(|(k, _, _)| *k == key(c)) {
            row.reduction_pct = reduction(row.mean_gflops, total);
            row.backbone_reduction_pct = reduction(row.mean_backbone_gflops, backbone);
        }
    }
    Ok(BenchReport {
        spec: spec.clone(),
        cost: *cost,
        rows,
    })
}

/// Fidelity of one flow-matching protocol on the analytic oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowFidelity {
    pub n_steps: usize,
    pub warm_start: bool,
    pub episodes: usize,
    pub total_denoising_steps: u64,
    pub mean_gflops: f64,
    /// Mean RMS distance of the final chunk from the reference sample.
    pub mean_reference_error: f64,
}

/// The exact-flow reference of an episode: the unperturbed mixture field integrated
/// with `reference_steps` Euler steps from the episode's first noise draw (the draw
/// every flow-matching protocol starts from).
pub fn exact_flow_reference(
    oracle: &OracleLayeredPolicy,
    episode: &Episode,
    stream: RngStream,
    reference_steps: usize,
) -> Result<ActionChunk> {
    let (h, d) = oracle.chunk_shape();
    let mut stream = stream;
    let noise = ActionChunk::noise(h, d, &mut stream);
    let mixture = oracle.mixture(&episode.observation)?;
    let out = euler_integrate(&MixtureField(&mixture), noise.as_slice(), reference_steps)?;
    ActionChunk::new(h, d, out)
}

fn rms(a: &ActionChunk, b: &ActionChunk) -> f64 {
    let sq: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    (sq / a.len() as f64).sqrt()
}

/// Runs `schedule` under a flow-matching protocol on the oracle and scores each final
/// chunk against [`exact_flow_reference`].
pub fn flow_fidelity(
    oracle: &OracleLayeredPolicy,
    episodes: &[Episode],
    schedule: &ExitSchedule,
    protocol: HeadProtocol,
    cost: &CostModel,
    root: &RngStream,
    reference_steps: usize,
) -> Result<FlowFidelity> {
    let HeadProtocol::Fm {
        n_steps,
        warm_start,
    } = protocol
    else {
        return Err(Error::InvalidArgument(
            "flow fidelity needs a flow-matching protocol".into(),
        ));
    };
    if episodes.is_empty() {
        return Err(Error::InvalidArgument(
            "flow fidelity needs at least one episode".into(),
        ));
    }
    let per_episode: Vec<(InferenceTrace, f64)> = episodes
        .par_iter()
        .enumerate()
        .map(|(n, ep)| {
            let trace = infer_early_exit(
                oracle,
                &ep.observation,
                schedule,
                protocol,
                cost,
                episode_stream(root, n),
            )?;
            let reference =
                exact_flow_reference(oracle, ep, episode_stream(root, n), reference_steps)?;
            let err = rms(&trace.chunk, &reference);
            Ok((trace, err))
        })
        .collect::<Result<_>>()?;
    let total_steps = per_episode
        .iter()
        .map(|(t, _)| t.denoising_steps as u64)
        .sum();
    let n = episodes.len() as f64;
    Ok(FlowFidelity {
        n_steps,
        warm_start,
        episodes: episodes.len(),
        total_denoising_steps: total_steps,
        mean_gflops: per_episode.iter().map(|(t, _)| t.gflops).sum::<f64>() / n,
        mean_reference_error: per_episode.iter().map(|(_, e)| e).sum::<f64>() / n,
    })
}
