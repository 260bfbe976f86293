//! Threshold calibration for early exit.
//!
//! A schedule visits taps `t_0 < t_1 < … < t_K`. The first tap is a reference with no
//! predecessor and never exits; each later tap `t_k` compares its chunk with the one at
//! `t_{k-1}` and exits when the discrepancy is `≤ η_k`. The last threshold is `+∞`, so
//! the final tap always exits. A [`DiscrepancyMatrix`] therefore has `K` rows, one per
//! exit tap, and an [`ExitDistribution`] assigns a target fraction to each of them.

mod distribution;
mod metric;

pub use distribution::{exit_distribution, ExitDistribution, ExitFamily};
pub use metric::{discrepancy, DiscrepancyMetric};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{HeadProtocol, LayerTappedPolicy, Observation, TapChain};
use crate::error::{Error, Result};
use crate::numkernel::RngStream;
use crate::runtime::{episode_stream, CostModel, WorkCounts};

/// How the quantile level for exit `k` is derived from the target fractions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QuantileMode {
    /// Level `p_k` applied to the samples still unassigned.
    Literal,
    /// Level `p_k / Σ_{j≥k} p_j`, so that overall exit fractions match `p`.
    #[default]
    Renormalized,
}

impl QuantileMode {
    pub fn name(self) -> &'static str {
        match self {
            QuantileMode::Literal => "literal",
            QuantileMode::Renormalized => "renormalized",
        }
    }
}

/// `V[k][n]`: discrepancy at exit tap `k` for sample `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyMatrix {
    taps: Vec<usize>,
    metric: DiscrepancyMetric,
    values: Vec<Vec<f64>>,
}

pub(crate) fn validate_taps(taps: &[usize]) -> Result<()> {
    if taps.is_empty() {
        return Err(Error::InvalidArgument(
            "a schedule needs at least one tap".into(),
        ));
    }
    if taps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "taps must be strictly increasing: {taps:?}"
        )));
    }
    Ok(())
}

impl DiscrepancyMatrix {
    /// `taps` includes the reference tap, so `values.len() == taps.len() - 1`.
    pub fn new(taps: Vec<usize>, metric: DiscrepancyMetric, values: Vec<Vec<f64>>) -> Result<Self> {
        validate_taps(&taps)?;
        if taps.len() < 2 || values.len() != taps.len() - 1 {
            return Err(Error::InvalidArgument(format!(
                "discrepancy matrix with {} taps needs {} rows, got {}",
                taps.len(),
                taps.len().saturating_sub(1),
                values.len()
            )));
        }
        let n = values[0].len();
        if n == 0 {
            return Err(Error::InvalidArgument(
                "discrepancy matrix has no samples".into(),
            ));
        }
        for row in &values {
            if row.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "discrepancy matrix row",
                    expected: n,
                    actual: row.len(),
                });
            }
            if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::NonFinite {
                    context: "discrepancy matrix entries must be finite and ≥ 0".into(),
                });
            }
        }
        Ok(Self {
            taps,
            metric,
            values,
        })
    }

    /// Number of exit taps `K`.
    pub fn exits(&self) -> usize {
        self.values.len()
    }

    pub fn samples(&self) -> usize {
        self.values[0].len()
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    pub fn exit_taps(&self) -> &[usize] {
        &self.taps[1..]
    }

    pub fn metric(&self) -> DiscrepancyMetric {
        self.metric
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn row_means(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|r| r.iter().sum::<f64>() / r.len() as f64)
            .collect()
    }

    /// Matrix restricted to the given sample columns, in that order.
    pub fn select_columns(&self, columns: &[usize]) -> Result<Self> {
        let values = self
            .values
            .iter()
            .map(|row| {
                columns
                    .iter()
                    .map(|&c| row.get(c).copied())
                    .collect::<Option<Vec<f64>>>()
            })
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::InvalidArgument("column index out of range".into()))?;
        Self::new(self.taps.clone(), self.metric, values)
    }
}

/// Taps, thresholds and the comparison metric used at deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitSchedule {
    pub taps: Vec<usize>,
    /// Aligned with `taps`: `−∞` at the reference tap, `+∞` at the last tap.
    pub thresholds: Vec<f64>,
    pub metric: DiscrepancyMetric,
    pub mode: QuantileMode,
    /// Target exit fractions per exit tap (empty when hand-built).
    pub target: Vec<f64>,
}

impl ExitSchedule {
    /// Schedule with explicit thresholds for the exit taps (`taps[1..]`); the final one is
    /// forced to `+∞`.
    pub fn with_exit_thresholds(
        taps: Vec<usize>,
        exit_thresholds: &[f64],
        metric: DiscrepancyMetric,
    ) -> Result<Self> {
        validate_taps(&taps)?;
        if exit_thresholds.len() + 1 != taps.len() {
            return Err(Error::InvalidArgument(format!(
                "{} taps need {} exit thresholds, got {}",
                taps.len(),
                taps.len() - 1,
                exit_thresholds.len()
            )));
        }
        let mut thresholds = Vec::with_capacity(taps.len());
        if taps.len() == 1 {
            thresholds.push(f64::INFINITY);
        } else {
            thresholds.push(f64::NEG_INFINITY);
            thresholds.extend_from_slice(exit_thresholds);
            *thresholds.last_mut().unwrap() = f64::INFINITY;
        }
        let schedule = Self {
            taps,
            thresholds,
            metric,
            mode: QuantileMode::default(),
            target: Vec::new(),
        };
        schedule.validate()?;
        Ok(schedule)
    }

    /// Only the final tap exits.
    pub fn never_exit(taps: Vec<usize>, metric: DiscrepancyMetric) -> Result<Self> {
        let k = taps.len().saturating_sub(1);
        Self::with_exit_thresholds(taps, &vec![f64::NEG_INFINITY; k], metric)
    }

    /// Every exit threshold `+∞`: the first comparable tap exits.
    pub fn always_exit(taps: Vec<usize>, metric: DiscrepancyMetric) -> Result<Self> {
        let k = taps.len().saturating_sub(1);
        Self::with_exit_thresholds(taps, &vec![f64::INFINITY; k], metric)
    }

    pub fn validate(&self) -> Result<()> {
        validate_taps(&self.taps)?;
        if self.thresholds.len() != self.taps.len() {
            return Err(Error::InvalidArgument(
                "schedule thresholds and taps differ in length".into(),
            ));
        }
        if self.thresholds.iter().any(|t| t.is_nan()) {
            return Err(Error::InvalidArgument("schedule threshold is NaN".into()));
        }
        if *self.thresholds.last().unwrap() != f64::INFINITY {
            return Err(Error::InvalidArgument(
                "final schedule threshold must be +inf".into(),
            ));
        }
        if self.taps.len() > 1 && self.thresholds[0] != f64::NEG_INFINITY {
            return Err(Error::InvalidArgument(
                "reference tap threshold must be -inf".into(),
            ));
        }
        if !self.target.is_empty() && self.target.len() != self.exit_taps().len() {
            return Err(Error::InvalidArgument(
                "schedule target length does not match exit taps".into(),
            ));
        }
        Ok(())
    }

    pub fn exit_taps(&self) -> &[usize] {
        if self.taps.len() == 1 {
            &self.taps
        } else {
            &self.taps[1..]
        }
    }

    /// Exit rule at schedule position `index` for discrepancy `delta` (inclusive).
    pub fn exits(&self, index: usize, delta: f64) -> bool {
        delta <= self.thresholds[index]
    }

    /// Copy with every finite threshold multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for t in &mut out.thresholds {
            if t.is_finite() {
                *t *= factor;
            }
        }
        out
    }
}

/// Nearest-rank quantile of ascending `sorted`: the value at 1-based rank `⌈q·m⌉`.
///
/// `q ≤ 0` (or a rank that rounds to 0) gives `−∞`; ranks within 1e-9 of an integer
/// snap to it so that levels like `0.3 · 10` do not jump a rank through rounding.
pub fn nearest_rank_quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() || !(q > 0.0) {
        return f64::NEG_INFINITY;
    }
    let m = sorted.len() as f64;
    let r = q.min(1.0) * m;
    let rank = if (r - r.round()).abs() <= 1e-9 * m.max(1.0) {
        r.round()
    } else {
        r.ceil()
    };
    if rank < 1.0 {
        return f64::NEG_INFINITY;
    }
    sorted[(rank as usize).min(sorted.len()) - 1]
}

/// Output of [`calibrate_thresholds`].
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub schedule: ExitSchedule,
    /// Exit index (0-based over exit taps) for each calibration sample.
    pub assignment: Vec<usize>,
    /// Realized fraction of calibration samples per exit.
    pub realized: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Filtered-quantile calibration.
///
/// For `k = 1..K−1` over the still-unassigned set `I`: take `η_k` as the nearest-rank
/// quantile of `{V[k][n] : n ∈ I}` at the level given by `mode`, assign samples with
/// `V[k][n] ≤ η_k` to exit `k` and keep the rest. The final exit takes everything left.
pub fn calibrate_thresholds(
    v: &DiscrepancyMatrix,
    p: &ExitDistribution,
    mode: QuantileMode,
) -> Result<Calibration> {
    let k_exits = v.exits();
    if p.len() != k_exits {
        return Err(Error::DimensionMismatch {
            context: "exit distribution vs discrepancy rows",
            expected: k_exits,
            actual: p.len(),
        });
    }
    let probs = p.probabilities();
    let n = v.samples();
    let mut assignment = vec![usize::MAX; n];
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut exit_thresholds = Vec::with_capacity(k_exits);
    let mut warnings = Vec::new();

    for k in 0..k_exits - 1 {
        if remaining.is_empty() {
            if warnings.is_empty() {
                warnings.push(format!(
                    "all calibration samples assigned before exit {}; later thresholds set to -inf",
                    k + 1
                ));
            }
            exit_thresholds.push(f64::NEG_INFINITY);
            continue;
        }
        let level = match mode {
            QuantileMode::Literal => probs[k],
            QuantileMode::Renormalized => {
                let mass: f64 = probs[k..].iter().sum();
                if mass > 0.0 {
                    (probs[k] / mass).min(1.0)
                } else {
                    0.0
                }
            }
        };
        let row = v.row(k);
        let mut values: Vec<f64> = remaining.iter().map(|&i| row[i]).collect();
        values.sort_by(f64::total_cmp);
        let eta = nearest_rank_quantile(&values, level);
        remaining.retain(|&i| {
            if row[i] <= eta {
                assignment[i] = k;
                false
            } else {
                true
            }
        });
        exit_thresholds.push(eta);
    }
    for &i in &remaining {
        assignment[i] = k_exits - 1;
    }
    exit_thresholds.push(f64::INFINITY);

    let mut counts = vec![0usize; k_exits];
    for &a in &assignment {
        counts[a] += 1;
    }
    let realized = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let mut schedule =
        ExitSchedule::with_exit_thresholds(v.taps().to_vec(), &exit_thresholds, v.metric())?;
    schedule.mode = mode;
    schedule.target = probs.to_vec();
    Ok(Calibration {
        schedule,
        assignment,
        realized,
        warnings,
    })
}

/// Runs every sample through all `taps` (no exits) and records the discrepancies.
///
/// Sample `n` uses `episode_stream(root, n)`, exactly as the runtime engines do, so the
/// flow-matching warm-start chain and its noise draws match deployment.
pub fn collect_discrepancies<P: LayerTappedPolicy>(
    policy: &P,
    dataset: &[Observation],
    taps: &[usize],
    metric: DiscrepancyMetric,
    protocol: HeadProtocol,
    root: &RngStream,
) -> Result<DiscrepancyMatrix> {
    validate_taps(taps)?;
    if taps.len() < 2 {
        return Err(Error::InvalidArgument(
            "calibration needs at least 2 taps".into(),
        ));
    }
    for &t in taps {
        policy.check_tap(t)?;
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArgument(
            "calibration dataset is empty".into(),
        ));
    }
    let columns: Vec<Vec<f64>> = (0..dataset.len())
        .into_par_iter()
        .map(|n| {
            let fail = |tap: usize, e: Error| Error::TapFailure {
                sample: n,
                tap,
                source: Box::new(e),
            };
            let mut chain = TapChain::new(policy, &dataset[n], protocol, episode_stream(root, n))
                .map_err(|e| fail(taps[0], e))?;
            let mut previous = chain.next_tap(taps[0]).map_err(|e| fail(taps[0], e))?;
            let mut column = Vec::with_capacity(taps.len() - 1);
            for &tap in &taps[1..] {
                let chunk = chain.next_tap(tap).map_err(|e| fail(tap, e))?;
                column.push(discrepancy(&chunk, &previous, metric).map_err(|e| fail(tap, e))?);
                previous = chunk;
            }
            Ok(column)
        })
        .collect::<Result<_>>()?;
    let values = (0..taps.len() - 1)
        .map(|k| columns.iter().map(|c| c[k]).collect())
        .collect();
    DiscrepancyMatrix::new(taps.to_vec(), metric, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitStats {
    pub expected_layer: f64,
    pub expected_gflops: f64,
}

/// Expected exit layer and accounted cost when exit `k` happens with probability `p_k`.
///
/// With `taps.len() == K + 1` the first tap is the reference tap (visited, never exited);
/// with `taps.len() == K` the taps are the exit taps themselves.
pub fn expected_exit_stats(
    p: &ExitDistribution,
    taps: &[usize],
    cost: &CostModel,
    protocol: HeadProtocol,
) -> Result<ExitStats> {
    let k = p.len();
    let offset = if taps.len() == k + 1 {
        1
    } else if taps.len() == k {
        0
    } else {
        return Err(Error::DimensionMismatch {
            context: "exit taps vs distribution",
            expected: k,
            actual: taps.len(),
        });
    };
    let mut layer = 0.0;
    let mut gflops = 0.0;
    for (i, &pk) in p.probabilities().iter().enumerate() {
        let visited = i + 1 + offset;
        let counts = WorkCounts {
            head: protocol.kind(),
            layers_run: taps[i + offset],
            head_evals: if protocol.kind() == crate::backbone::HeadKind::Mlp {
                visited
            } else {
                0
            },
            denoising_steps: visited * protocol.n_steps(),
            comparisons: visited - 1,
        };
        layer += pk * taps[i + offset] as f64;
        gflops += pk * cost.account(&counts);
    }
    Ok(ExitStats {
        expected_layer: layer,
        expected_gflops: gflops,
    })
}
