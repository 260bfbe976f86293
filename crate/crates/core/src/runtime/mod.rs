//! Early-exit inference engines and FLOPs accounting.
//!
//! Engines walk a schedule's taps in order, produce a chunk at each tap and stop at the
//! first exit tap whose discrepancy to the previous tap is within its threshold. The
//! flow-matching engine integrates `n_steps` Euler steps per tap, optionally starting
//! each tap from the previous tap's output (warm start).

mod cost;

pub use cost::{account_cost, CostModel, WorkCounts};

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::backbone::{HeadKind, HeadProtocol, LayerTappedPolicy, Observation, TapChain};
use crate::calibration::{discrepancy, ExitSchedule};
use crate::error::{Error, Result};
use crate::flowcore::ActionChunk;
use crate::numkernel::RngStream;

/// Per-episode stream: episode `n` of a run seeded by `root`.
pub fn episode_stream(root: &RngStream, n: usize) -> RngStream {
    root.fork(n as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub head: HeadKind,
    pub exit_layer: usize,
    /// Position of the exit tap in the schedule.
    pub exit_index: usize,
    pub layers_run: usize,
    pub taps_visited: usize,
    pub head_evals: usize,
    pub denoising_steps: usize,
    pub comparisons: usize,
    pub gflops: f64,
    pub chunk: ActionChunk,
    /// Discrepancy at each visited tap after the first.
    pub discrepancies: Vec<f64>,
}

impl InferenceTrace {
    pub fn counts(&self) -> WorkCounts {
        WorkCounts {
            head: self.head,
            layers_run: self.layers_run,
            head_evals: self.head_evals,
            denoising_steps: self.denoising_steps,
            comparisons: self.comparisons,
        }
    }
}

fn check_schedule<P: LayerTappedPolicy>(policy: &P, schedule: &ExitSchedule) -> Result<()> {
    schedule.validate()?;
    for &t in &schedule.taps {
        policy.check_tap(t)?;
    }
    Ok(())
}

/// Full-depth inference: one head evaluation (or one `n_steps` integration from noise)
/// at the last layer.
pub fn infer_full<P: LayerTappedPolicy>(
    policy: &P,
    obs: &Observation,
    protocol: HeadProtocol,
    cost: &CostModel,
    stream: RngStream,
) -> Result<InferenceTrace> {
    let layer = policy.num_layers();
    let mut chain = TapChain::new(policy, obs, protocol, stream)?;
    let chunk = chain.next_tap(layer)?;
    let mut trace = InferenceTrace {
        head: protocol.kind(),
        exit_layer: layer,
        exit_index: 0,
        layers_run: chain.layers_run(),
        taps_visited: chain.taps_visited(),
        head_evals: chain.head_evals(),
        denoising_steps: chain.denoising_steps(),
        comparisons: 0,
        gflops: 0.0,
        chunk,
        discrepancies: Vec::new(),
    };
    trace.gflops = account_cost(&trace, cost);
    Ok(trace)
}

/// Early-exit inference under any head protocol.
pub fn infer_early_exit<P: LayerTappedPolicy>(
    policy: &P,
    obs: &Observation,
    schedule: &ExitSchedule,
    protocol: HeadProtocol,
    cost: &CostModel,
    stream: RngStream,
) -> Result<InferenceTrace> {
    check_schedule(policy, schedule)?;
    let mut chain = TapChain::new(policy, obs, protocol, stream)?;
    let mut previous: Option<ActionChunk> = None;
    let mut discrepancies = Vec::new();
    let last = schedule.taps.len() - 1;
    for (index, &layer) in schedule.taps.iter().enumerate() {
        let chunk = chain.next_tap(layer)?;
        let exit = match &previous {
            Some(prev) => {
                let d = discrepancy(&chunk, prev, schedule.metric)?;
                discrepancies.push(d);
                schedule.exits(index, d)
            }
            None => index == last,
        };
        if exit || index == last {
            let mut trace = InferenceTrace {
                head: protocol.kind(),
                exit_layer: layer,
                exit_index: index,
                layers_run: chain.layers_run(),
                taps_visited: chain.taps_visited(),
                head_evals: chain.head_evals(),
                denoising_steps: chain.denoising_steps(),
                comparisons: discrepancies.len(),
                gflops: 0.0,
                chunk,
                discrepancies,
            };
            trace.gflops = account_cost(&trace, cost);
            return Ok(trace);
        }
        previous = Some(chunk);
    }
    unreachable!("the final tap always exits")
}

/// Early exit with the regression head.
pub fn infer_mlp_early_exit<P: LayerTappedPolicy>(
    policy: &P,
    obs: &Observation,
    schedule: &ExitSchedule,
    cost: &CostModel,
) -> Result<InferenceTrace> {
    // The regression protocol draws no randomness.
    infer_early_exit(
        policy,
        obs,
        schedule,
        HeadProtocol::Mlp,
        cost,
        RngStream::new(0),
    )
}

/// Inter-layer truncated flow matching: `n_steps_per_layer` Euler steps at every visited
/// tap, starting from the previous tap's output when `warm_start` is set.
pub fn infer_fm_early_exit<P: LayerTappedPolicy>(
    policy: &P,
    obs: &Observation,
    schedule: &ExitSchedule,
    n_steps_per_layer: usize,
    warm_start: bool,
    cost: &CostModel,
    stream: RngStream,
) -> Result<InferenceTrace> {
    let protocol = HeadProtocol::Fm {
        n_steps: n_steps_per_layer,
        warm_start,
    };
    infer_early_exit(policy, obs, schedule, protocol, cost, stream)
}

/// Writes one JSON object per trace per line.
pub fn write_traces_jsonl<W: Write>(traces: &[InferenceTrace], mut out: W) -> Result<()> {
    for t in traces {
        let line = serde_json::to_string(t).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io("<trace stream>", e))?;
    }
    Ok(())
}

pub fn read_traces_jsonl<R: BufRead>(input: R) -> Result<Vec<InferenceTrace>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<trace stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("trace line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}
