use serde::{Deserialize, Serialize};

use super::InferenceTrace;
use crate::backbone::HeadKind;
use crate::error::{Error, Result};

/// Per-operation compute cost in GFLOPs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    /// Vision front end, paid once per inference.
    pub vision: f64,
    pub layer: f64,
    pub mlp_head: f64,
    pub fm_step: f64,
    pub comparison: f64,
    /// Fixed extra cost per flow-matching inference.
    pub fm_overhead: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            vision: 2013.36,
            layer: 323.61,
            mlp_head: 1.850,
            fm_step: 0.493,
            comparison: 0.0,
            fm_overhead: 0.0,
        }
    }
}

impl CostModel {
    pub fn zero() -> Self {
        Self {
            vision: 0.0,
            layer: 0.0,
            mlp_head: 0.0,
            fm_step: 0.0,
            comparison: 0.0,
            fm_overhead: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.vision,
            self.layer,
            self.mlp_head,
            self.fm_step,
            self.comparison,
            self.fm_overhead,
        ];
        if fields.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "cost model entries must be finite and ≥ 0: {self:?}"
            )))
        }
    }

    pub fn account(&self, counts: &WorkCounts) -> f64 {
        let overhead = if counts.head == HeadKind::Fm {
            self.fm_overhead
        } else {
            0.0
        };
        self.vision
            + counts.layers_run as f64 * self.layer
            + counts.head_evals as f64 * self.mlp_head
            + counts.denoising_steps as f64 * self.fm_step
            + counts.comparisons as f64 * self.comparison
            + overhead
    }

    /// Backbone-only part: `layers · per-layer`.
    pub fn backbone(&self, layers_run: usize) -> f64 {
        layers_run as f64 * self.layer
    }
}

/// Work done by one inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkCounts {
    pub head: HeadKind,
    pub layers_run: usize,
    pub head_evals: usize,
    pub denoising_steps: usize,
    pub comparisons: usize,
}

/// Recomputes a trace's GFLOPs from its counts.
pub fn account_cost(trace: &InferenceTrace, cost: &CostModel) -> f64 {
    cost.account(&trace.counts())
}
