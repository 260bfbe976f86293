//! Dataset, calibration and report files.

use std::path::Path;

use exitflow_core::backbone::HeadProtocol;
use exitflow_core::calibration::{
    DiscrepancyMatrix, DiscrepancyMetric, ExitFamily, ExitSchedule, QuantileMode,
};
use exitflow_core::synthbench::{BenchReport, Episode, SyntheticTaskSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::FORMAT_VERSION;
use crate::error::CliError;

pub const DATASET_FILE: &str = "dataset.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const CALIBRATION_FILE: &str = "calibration.toml";
pub const CALIBRATION_V_FILE: &str = "calibration_v.csv";
pub const BENCH_CSV_FILE: &str = "bench.csv";
pub const BENCH_HIST_FILE: &str = "bench_hist.csv";
pub const BENCH_JSON_FILE: &str = "bench.json";
pub const SUMMARY_FILE: &str = "summary.csv";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// First line of every CSV artifact.
pub fn csv_stamp(config_hash: &str) -> String {
    format!("# exitflow format_version={FORMAT_VERSION} config_hash={config_hash}\n")
}

fn check_version(what: &str, found: u32) -> Result<(), CliError> {
    if found == FORMAT_VERSION {
        Ok(())
    } else {
        Err(CliError::corrupt(
            "version",
            format!("{what} format version {found} is not supported (this build reads version {FORMAT_VERSION})"),
        ))
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::missing(path, e))
}

/// Short protocol name used in ids and sidecar files: `mlp`, `fm-2-warm`, `fm-10-cold`.
pub fn protocol_label(p: HeadProtocol) -> String {
    match p {
        HeadProtocol::Mlp => "mlp".into(),
        HeadProtocol::Fm {
            n_steps,
            warm_start,
        } => {
            format!("fm-{n_steps}-{}", if warm_start { "warm" } else { "cold" })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub format_version: u32,
    pub config_hash: String,
    pub task: SyntheticTaskSpec,
    pub train: Vec<Episode>,
    pub calibration: Vec<Episode>,
    pub eval: Vec<Episode>,
}

impl DatasetFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("dataset serializes")
    }

    pub fn load(path: &Path, task: &SyntheticTaskSpec) -> Result<Self, CliError> {
        let bytes = read(path)?;
        let file: DatasetFile = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::corrupt("dataset", format!("{}: {e}", path.display())))?;
        check_version("dataset", file.format_version)?;
        if &file.task != task {
            return Err(CliError::usage(format!(
                "{} was generated for a different task spec; rerun gen-data",
                path.display()
            )));
        }
        Ok(file)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub c: f64,
    /// Target exit fractions over the exit taps.
    pub p: Vec<f64>,
    /// Aligned with `taps`: reference tap first (`-inf`), last exit `inf`.
    pub thresholds: Vec<f64>,
    /// Fraction of calibration samples assigned to each exit tap.
    pub realized: Vec<f64>,
    pub expected_layer: f64,
    pub expected_gflops: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VSummary {
    pub mean: Vec<f64>,
    pub median: Vec<f64>,
    pub p90: Vec<f64>,
    pub max: Vec<f64>,
}

impl VSummary {
    pub fn of(v: &DiscrepancyMatrix) -> Self {
        let mut s = VSummary {
            mean: Vec::new(),
            median: Vec::new(),
            p90: Vec::new(),
            max: Vec::new(),
        };
        for row in v.rows() {
            let mut sorted = row.clone();
            sorted.sort_by(f64::total_cmp);
            let q = |f: f64| {
                sorted[((f * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1]
            };
            s.mean.push(row.iter().sum::<f64>() / row.len() as f64);
            s.median.push(q(0.5));
            s.p90.push(q(0.9));
            s.max.push(sorted[sorted.len() - 1]);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolCalibration {
    pub label: String,
    pub protocol: HeadProtocol,
    pub taps: Vec<usize>,
    pub v: VSummary,
    pub schedules: Vec<ScheduleEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationFile {
    pub format_version: u32,
    pub config_hash: String,
    /// SHA-256 of the checkpoint file the discrepancies were collected with.
    pub checkpoint_hash: String,
    pub metric: DiscrepancyMetric,
    pub mode: QuantileMode,
    pub family: ExitFamily,
    pub spread: Option<f64>,
    pub samples: usize,
    pub protocols: Vec<ProtocolCalibration>,
}

impl CalibrationFile {
    pub fn to_text(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::corrupt("calibration", e.to_string()))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let file: CalibrationFile = toml::from_str(text)
            .map_err(|e| CliError::corrupt("calibration", e.message().replace('\n', " ")))?;
        check_version("calibration", file.format_version)?;
        Ok(file)
    }

    /// The parsed file and the SHA-256 of its bytes.
    pub fn load(path: &Path) -> Result<(Self, String), CliError> {
        let bytes = read(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|_| {
            CliError::corrupt("calibration", format!("{} is not UTF-8", path.display()))
        })?;
        let file = Self::parse(text).map_err(|e| e.context(&path.display().to_string()))?;
        Ok((file, sha256_hex(&bytes)))
    }

    /// The deployable schedule for one entry.
    pub fn schedule(
        &self,
        protocol: &ProtocolCalibration,
        entry: &ScheduleEntry,
    ) -> Result<ExitSchedule, CliError> {
        let schedule = ExitSchedule {
            taps: protocol.taps.clone(),
            thresholds: entry.thresholds.clone(),
            metric: self.metric,
            mode: self.mode,
            target: entry.p.clone(),
        };
        schedule.validate().map_err(|e| {
            CliError::corrupt(
                "calibration",
                format!("{} c={}: {e}", protocol.label, entry.c),
            )
        })?;
        Ok(schedule)
    }
}

/// `V` in long format, one line per (protocol, exit tap, sample).
pub fn v_sidecar_csv(
    config_hash: &str,
    entries: &[(String, &DiscrepancyMatrix)],
) -> Result<Vec<u8>, CliError> {
    let mut out = csv_stamp(config_hash).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let fail = |e: csv::Error| CliError::corrupt("calibration", e.to_string());
        w.write_record(["protocol", "exit_tap", "sample", "value"])
            .map_err(fail)?;
        for (label, v) in entries {
            for (k, row) in v.rows().iter().enumerate() {
                let tap = v.exit_taps()[k].to_string();
                for (n, value) in row.iter().enumerate() {
                    w.write_record([label.as_str(), &tap, &n.to_string(), &value.to_string()])
                        .map_err(fail)?;
                }
            }
        }
        w.flush()
            .map_err(|e| CliError::corrupt("calibration", e.to_string()))?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchFile {
    pub format_version: u32,
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub calibration_hash: String,
    pub report: BenchReport,
}

impl BenchFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("report serializes")
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = read(path)?;
        let file: BenchFile = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::corrupt("report", format!("{}: {e}", path.display())))?;
        check_version("report", file.format_version)?;
        Ok(file)
    }
}
