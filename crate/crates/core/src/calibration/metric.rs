use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowcore::ActionChunk;

/// Discrepancy between two action chunks, computed over their flattened values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DiscrepancyMetric {
    /// `1 − cos∠(a, b)`; 0 when either side has zero norm.
    CosineDistance,
    #[default]
    L2,
    MeanAbsDev,
}

impl DiscrepancyMetric {
    pub fn name(self) -> &'static str {
        match self {
            DiscrepancyMetric::CosineDistance => "cosine_distance",
            DiscrepancyMetric::L2 => "l2",
            DiscrepancyMetric::MeanAbsDev => "mean_abs_dev",
        }
    }

    /// Same as [`discrepancy`] on raw slices.
    pub fn eval(self, a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch {
                context: "discrepancy operands",
                expected: a.len(),
                actual: b.len(),
            });
        }
        if a.is_empty() {
            return Err(Error::InvalidArgument("discrepancy of empty chunks".into()));
        }
        let value = match self {
            DiscrepancyMetric::L2 => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            DiscrepancyMetric::MeanAbsDev => {
                a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
            }
            DiscrepancyMetric::CosineDistance => {
                let sa: f64 = a.iter().map(|x| x * x).sum();
                let sb: f64 = b.iter().map(|x| x * x).sum();
                if sa == 0.0 || sb == 0.0 {
                    0.0
                } else {
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    (1.0 - dot / (sa * sb).sqrt()).max(0.0)
                }
            }
        };
        Ok(value)
    }
}

impl std::fmt::Display for DiscrepancyMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DiscrepancyMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine_distance" => Ok(DiscrepancyMetric::CosineDistance),
            "l2" => Ok(DiscrepancyMetric::L2),
            "mean_abs_dev" => Ok(DiscrepancyMetric::MeanAbsDev),
            other => Err(Error::Parse(format!(
                "unknown discrepancy metric {other:?}"
            ))),
        }
    }
}

pub fn discrepancy(a: &ActionChunk, b: &ActionChunk, metric: DiscrepancyMetric) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            context: "discrepancy chunk shapes",
            expected: a.len(),
            actual: b.len(),
        });
    }
    metric.eval(a.as_slice(), b.as_slice())
}
