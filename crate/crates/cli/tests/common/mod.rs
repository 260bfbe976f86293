#![allow(dead_code)]

use std::ffi::OsStr;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

/// Every artifact the full pipeline writes, in stage order.
pub const ARTIFACTS: [&str; 9] = [
    "dataset.json",
    "model.ckpt",
    "train_log.csv",
    "calibration.toml",
    "calibration_v.csv",
    "bench.csv",
    "bench_hist.csv",
    "bench.json",
    "summary.csv",
];

pub fn shipped_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

pub fn exitflow<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_exitflow"))
        .args(args)
        .output()
        .expect("exitflow binary runs")
}

/// Runs one pipeline stage and fails with its stderr line.
pub fn stage(command: &str, config: &Path, out: &Path) -> Result<(), String> {
    let output = if command == "report" {
        exitflow([OsStr::new("report"), OsStr::new("--in"), out.as_os_str()])
    } else {
        exitflow([
            OsStr::new(command),
            OsStr::new("--config"),
            config.as_os_str(),
            OsStr::new("--out"),
            out.as_os_str(),
        ])
    };
    if output.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{command}: {}",
            String::from_utf8_lossy(&output.stderr).trim()
        ))
    }
}

pub fn run_pipeline(config: &Path, out: &Path) -> Result<(), String> {
    for command in ["gen-data", "train", "calibrate", "bench", "report"] {
        stage(command, config, out)?;
    }
    Ok(())
}

pub fn artifact_hashes(dir: &Path) -> Vec<(String, String)> {
    ARTIFACTS
        .iter()
        .map(|name| {
            let bytes = std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
            (name.to_string(), hex::encode(Sha256::digest(bytes)))
        })
        .collect()
}

fn golden_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(format!("{name}.sha256"))
}

/// Compares against `tests/golden/<name>.sha256`; `EXITFLOW_BLESS=1` rewrites the file.
pub fn check_golden(name: &str, hashes: &[(String, String)]) -> Result<(), String> {
    let mut text = String::new();
    for (file, hash) in hashes {
        writeln!(text, "{hash}  {file}").unwrap();
    }
    let path = golden_path(name);
    if std::env::var_os("EXITFLOW_BLESS").is_some_and(|v| v == "1") {
        std::fs::write(&path, &text).map_err(|e| e.to_string())?;
        return Ok(());
    }
    let expected =
        std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mismatched: Vec<&str> = expected
        .lines()
        .zip(text.lines())
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.rsplit(' ').next().unwrap_or(a))
        .collect();
    if mismatched.is_empty() && expected.lines().count() == text.lines().count() {
        Ok(())
    } else {
        Err(format!("golden {name} differs for {mismatched:?}"))
    }
}
