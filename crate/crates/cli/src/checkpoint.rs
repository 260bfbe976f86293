//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `EXFLCKPT` |
//! | 4 | format version (`u32`) |
//! | 8 | manifest length `m` (`u64`) |
//! | m | UTF-8 JSON manifest |
//! | 8·n | parameter sections as `f64`, in manifest order |
//! | 32 | SHA-256 of every preceding byte |

use std::path::Path;

use exitflow_core::numkernel::{AdamWConfig, OptState, RngStream};
use exitflow_core::synthbench::SyntheticTaskSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ModelSection, FORMAT_VERSION};
use crate::error::CliError;

pub const MAGIC: &[u8; 8] = b"EXFLCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSnapshot {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl OptimizerSnapshot {
    pub fn capture(opt: &OptState) -> Self {
        let (m, v) = opt.moments();
        Self {
            config: opt.config,
            step: opt.step_count(),
            first_moment: m.to_vec(),
            second_moment: v.to_vec(),
        }
    }

    pub fn restore(&self) -> Result<OptState, CliError> {
        OptState::from_parts(
            self.config,
            self.first_moment.clone(),
            self.second_moment.clone(),
            self.step,
        )
        .map_err(|e| CliError::corrupt("checkpoint", e.to_string()))
    }
}

/// A trained (or analytic) model with the state needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub task: SyntheticTaskSpec,
    pub model: ModelSection,
    /// Training steps taken.
    pub step: u64,
    /// Position of the training stream after the last step.
    pub rng_seed: u64,
    pub rng_counter: u64,
    /// Parameter block lengths in visiting order.
    pub blocks: Vec<usize>,
    pub params: Vec<f64>,
    pub optimizer: Option<OptimizerSnapshot>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    config_hash: String,
    task: SyntheticTaskSpec,
    model: ModelSection,
    step: u64,
    rng_seed: u64,
    rng_counter: u64,
    blocks: Vec<usize>,
    param_count: usize,
    optimizer: Option<OptimizerManifest>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerManifest {
    config: AdamWConfig,
    step: u64,
    moments: usize,
}

fn corrupt(message: impl Into<String>) -> CliError {
    CliError::corrupt("checkpoint", message)
}

impl Checkpoint {
    pub fn rng(&self) -> RngStream {
        RngStream::at(self.rng_seed, self.rng_counter)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config_hash: self.config_hash.clone(),
            task: self.task.clone(),
            model: self.model.clone(),
            step: self.step,
            rng_seed: self.rng_seed,
            rng_counter: self.rng_counter,
            blocks: self.blocks.clone(),
            param_count: self.params.len(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerManifest {
                config: o.config,
                step: o.step,
                moments: o.first_moment.len(),
            }),
        };
        let text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(&text);
        let mut push = |values: &[f64]| {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        push(&self.params);
        if let Some(o) = &self.optimizer {
            push(&o.first_moment);
            push(&o.second_moment);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic)"));
        }
        if bytes.len() < 12 {
            return Err(corrupt("truncated header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CliError::corrupt(
                "version",
                format!("checkpoint format version {version} is not supported (this build reads version {FORMAT_VERSION})"),
            ));
        }
        if bytes.len() < 20 + 32 {
            return Err(corrupt("truncated header"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt(
                "checksum mismatch (file is truncated or corrupted)",
            ));
        }
        let manifest_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let rest = &body[20..];
        if manifest_len > rest.len() {
            return Err(corrupt("manifest length exceeds file size"));
        }
        let (text, data) = rest.split_at(manifest_len);
        let manifest: Manifest = serde_json::from_slice(text)
            .map_err(|e| corrupt(format!("unreadable manifest: {e}")))?;
        if manifest.format_version != version {
            return Err(corrupt("manifest version disagrees with the header"));
        }
        if manifest.blocks.iter().sum::<usize>() != manifest.param_count {
            return Err(corrupt(format!(
                "dimension manifest sums to {} but param_count is {}",
                manifest.blocks.iter().sum::<usize>(),
                manifest.param_count
            )));
        }
        let moments = manifest.optimizer.as_ref().map_or(0, |o| o.moments);
        let expected = manifest.param_count + 2 * moments;
        if data.len() != 8 * expected {
            return Err(corrupt(format!(
                "parameter block holds {} bytes, manifest expects {}",
                data.len(),
                8 * expected
            )));
        }
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (params, moment_values) = values.split_at(manifest.param_count);
        let optimizer = manifest.optimizer.map(|o| OptimizerSnapshot {
            config: o.config,
            step: o.step,
            first_moment: moment_values[..o.moments].to_vec(),
            second_moment: moment_values[o.moments..].to_vec(),
        });
        Ok(Self {
            config_hash: manifest.config_hash,
            task: manifest.task,
            model: manifest.model,
            step: manifest.step,
            rng_seed: manifest.rng_seed,
            rng_counter: manifest.rng_counter,
            blocks: manifest.blocks,
            params: params.to_vec(),
            optimizer,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::missing(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.context(&path.display().to_string()))
    }
}
