mod common;

use std::path::Path;

use common::*;
use exitflow_cli::artifact::CalibrationFile;
use exitflow_core::synthbench::SUMMARY_COLUMNS;
use serde_json::Value;

fn stderr_line(out: &std::process::Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {text}");
    serde_json::from_str(lines[0]).expect("stderr is one JSON object")
}

fn write_config(dir: &Path, base: &str, edit: impl Fn(String) -> String) -> std::path::PathBuf {
    let text = std::fs::read_to_string(shipped_config(base)).unwrap();
    let path = dir.join("config.toml");
    std::fs::write(&path, edit(text)).unwrap();
    path
}

#[test]
fn oracle_pipeline_is_deterministic_and_matches_golden() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let config = shipped_config("oracle.toml");
    run_pipeline(&config, a.path()).unwrap();
    run_pipeline(&config, b.path()).unwrap();
    let ha = artifact_hashes(a.path());
    assert_eq!(ha, artifact_hashes(b.path()));
    check_golden("oracle", &ha).unwrap();

    // Idempotent: rerunning a stage in place rewrites identical bytes.
    stage("bench", &config, a.path()).unwrap();
    assert_eq!(artifact_hashes(a.path()), ha);

    let summary = std::fs::read_to_string(a.path().join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert!(lines
        .next()
        .unwrap()
        .starts_with("# exitflow format_version=1 config_hash="));
    assert_eq!(lines.next().unwrap(), SUMMARY_COLUMNS.join(","));
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = shipped_config("oracle.toml");
    for command in ["gen-data", "train", "calibrate"] {
        stage(command, &config, dir.path()).unwrap();
    }
    let hash = |threads: &str| {
        let out = std::process::Command::new(env!("CARGO_BIN_EXE_exitflow"))
            .args(["bench", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(dir.path())
            .env("EXITFLOW_THREADS", threads)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        std::fs::read(dir.path().join("bench.json")).unwrap()
    };
    assert_eq!(hash("1"), hash("3"));
}

#[test]
fn every_artifact_carries_version_and_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&shipped_config("oracle.toml"), dir.path()).unwrap();
    let cfg = exitflow_cli::config::RunConfig::load(&shipped_config("oracle.toml")).unwrap();
    let hash = cfg.hash();
    for name in ARTIFACTS {
        let bytes = std::fs::read(dir.path().join(name)).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.contains(&hash), "{name} lacks the config hash");
        assert!(
            text.contains("format_version") || bytes.starts_with(b"EXFLCKPT\x01\0\0\0"),
            "{name} lacks the format version"
        );
    }
}

#[test]
fn calibrating_exponential_c1_gives_uniform_p() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "oracle.toml", |t| {
        t.replace("c_grid = [1.0, 0.7, 0.4, 0.1]", "c_grid = [1.0]")
    });
    for command in ["gen-data", "train", "calibrate"] {
        stage(command, &config, dir.path()).unwrap();
    }
    let text = std::fs::read_to_string(dir.path().join("calibration.toml")).unwrap();
    let file = CalibrationFile::parse(&text).unwrap();
    assert_eq!(file.protocols.len(), 4);
    for pc in &file.protocols {
        let k = pc.taps.len() - 1;
        assert_eq!(k, 13);
        let entry = &pc.schedules[0];
        assert_eq!(entry.p.len(), k);
        for p in &entry.p {
            assert!((p - 1.0 / k as f64).abs() < 1e-15, "{p}");
        }
        assert_eq!(entry.thresholds.len(), k + 1);
        assert_eq!(entry.thresholds[0], f64::NEG_INFINITY);
        assert_eq!(entry.thresholds[k], f64::INFINITY);
    }
}

#[test]
fn usage_errors_exit_1_with_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = exitflow(["gen-data", "--config", "/nonexistent/config.toml"]);
    assert_eq!(missing.status.code(), Some(1));
    assert_eq!(stderr_line(&missing)["error"], "missing_input");

    let typo = write_config(dir.path(), "oracle.toml", |t| {
        t.replace("eval_size", "eval_sise")
    });
    let out = exitflow([
        Path::new("gen-data").as_os_str(),
        "--config".as_ref(),
        typo.as_os_str(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let line = stderr_line(&out);
    assert_eq!(line["error"], "config");
    assert!(line["message"].as_str().unwrap().contains("eval_sise"));

    let bad_cmd = exitflow(["frobnicate"]);
    assert_eq!(bad_cmd.status.code(), Some(1));
    assert_eq!(stderr_line(&bad_cmd)["error"], "usage");

    let config = shipped_config("oracle.toml");
    let no_ckpt = exitflow([
        "calibrate".as_ref(),
        "--config".as_ref(),
        config.as_os_str(),
        "--out".as_ref(),
        dir.path().as_os_str(),
    ]);
    assert_eq!(no_ckpt.status.code(), Some(1));

    let threads = std::process::Command::new(env!("CARGO_BIN_EXE_exitflow"))
        .args(["gen-data", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path())
        .env("EXITFLOW_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(1));
    assert!(!dir.path().join("dataset.json").exists());
}

#[test]
fn corrupt_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = shipped_config("oracle.toml");
    for command in ["gen-data", "train"] {
        stage(command, &config, dir.path()).unwrap();
    }
    let ckpt = dir.path().join("model.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes.truncate(bytes.len() - 5);
    std::fs::write(&ckpt, bytes).unwrap();
    let out = exitflow([
        "calibrate".as_ref(),
        "--config".as_ref(),
        config.as_os_str(),
        "--out".as_ref(),
        dir.path().as_os_str(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_line(&out)["error"], "checkpoint");
    assert!(!dir.path().join("calibration.toml").exists());
}

#[test]
fn failed_commit_leaves_no_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = shipped_config("oracle.toml");
    for command in ["gen-data", "train", "calibrate"] {
        stage(command, &config, dir.path()).unwrap();
    }
    // A directory in the way of the second output makes its rename fail.
    std::fs::create_dir(dir.path().join("bench_hist.csv")).unwrap();
    let err = stage("bench", &config, dir.path()).unwrap_err();
    assert!(err.contains("\"exit_code\":2"), "{err}");
    let names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(
        !names
            .iter()
            .any(|n| n.starts_with("bench.") || n.contains(".tmp-")),
        "{names:?}"
    );
}

#[test]
fn seed_override_changes_every_stream() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let config = shipped_config("oracle.toml");
    stage("gen-data", &config, a.path()).unwrap();
    let out = exitflow([
        "gen-data".as_ref(),
        "--config".as_ref(),
        config.as_os_str(),
        "--out".as_ref(),
        b.path().as_os_str(),
        "--seed".as_ref(),
        "8".as_ref(),
    ]);
    assert!(out.status.success());
    let read = |d: &Path| std::fs::read(d.join("dataset.json")).unwrap();
    assert_ne!(read(a.path()), read(b.path()));
}

#[test]
fn toy_training_resumes_and_rejects_foreign_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "toy.toml", |t| {
        t.replace("steps = 2000", "steps = 30")
            .replace("train_size = 4096", "train_size = 64")
            .replace("calibration_size = 2000", "calibration_size = 50")
            .replace("eval_size = 2000", "eval_size = 50")
    });
    run_pipeline(&config, dir.path()).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let trained = std::fs::read(&ckpt).unwrap();
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2 + 30);

    // Resuming a finished run takes no steps and reproduces the checkpoint.
    let resume = |cfg: &Path| {
        exitflow([
            "train".as_ref(),
            "--config".as_ref(),
            cfg.as_os_str(),
            "--out".as_ref(),
            dir.path().as_os_str(),
            "--resume".as_ref(),
            ckpt.as_os_str(),
        ])
    };
    assert!(resume(&config).status.success());
    assert_eq!(std::fs::read(&ckpt).unwrap(), trained);

    let other = dir.path().join("other.toml");
    let text = std::fs::read_to_string(&config)
        .unwrap()
        .replace("width = 32", "width = 16");
    std::fs::write(&other, text).unwrap();
    let out = resume(&other);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(std::fs::read(&ckpt).unwrap(), trained);
}
