use std::path::{Path, PathBuf};

use exitflow_core::backbone::{fit, LayerTappedPolicy, ToyPolicy, TrainPlan};
use exitflow_core::calibration::{
    calibrate_thresholds, collect_discrepancies, exit_distribution, expected_exit_stats,
    DiscrepancyMatrix,
};
use exitflow_core::numkernel::{OptState, Parameterized};
use exitflow_core::synthbench::{
    gen_dataset, run_benchmark, write_histogram_csv, write_report_csv, write_summary_csv,
    BenchConfig,
};

use crate::artifact::*;
use crate::checkpoint::{Checkpoint, OptimizerSnapshot};
use crate::config::{ModelKind, Purpose, RunConfig, FORMAT_VERSION};
use crate::error::CliError;
use crate::fsout::OutputSet;
use crate::policy::{build_oracle, with_policy, LoadedPolicy};

/// Options shared by every pipeline command.
pub struct Common {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

impl Common {
    pub fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    fn input(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join(default))
    }
}

fn core(e: exitflow_core::Error) -> CliError {
    CliError::from(e)
}

pub fn gen_data(common: &Common) -> Result<Vec<PathBuf>, CliError> {
    let cfg = common.load()?;
    let task = &cfg.task;
    let file = DatasetFile {
        format_version: FORMAT_VERSION,
        config_hash: cfg.hash(),
        task: task.clone(),
        train: gen_dataset(task, cfg.derived_seed(Purpose::TrainData), task.train_size)
            .map_err(core)?,
        calibration: gen_dataset(
            task,
            cfg.derived_seed(Purpose::CalibrationData),
            task.calibration_size,
        )
        .map_err(core)?,
        eval: gen_dataset(task, cfg.derived_seed(Purpose::EvalData), task.eval_size)
            .map_err(core)?,
    };
    let mut out = OutputSet::new(&common.out)?;
    out.write(DATASET_FILE, &file.to_bytes())?;
    out.commit()
}

pub struct TrainArgs {
    pub data: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

fn train_log(cfg: &RunConfig, rows: &[(u64, f64, f64)]) -> Vec<u8> {
    let mut out = csv_stamp(&cfg.hash()).into_bytes();
    out.extend_from_slice(b"step,loss,lr\n");
    for (step, loss, lr) in rows {
        out.extend_from_slice(format!("{step},{loss},{lr}\n").as_bytes());
    }
    out
}

fn check_model(ck: &Checkpoint, cfg: &RunConfig, path: &Path) -> Result<(), CliError> {
    if ck.model != cfg.model || ck.task != cfg.task {
        return Err(CliError::usage(format!(
            "{} was produced for a different model or task section than this config",
            path.display()
        )));
    }
    Ok(())
}

pub fn train(common: &Common, args: &TrainArgs) -> Result<Vec<PathBuf>, CliError> {
    let cfg = common.load()?;
    let data_path = common.input(&args.data, DATASET_FILE);
    let data = DatasetFile::load(&data_path, &cfg.task)?;
    let mut log = Vec::new();

    let checkpoint = match cfg.model.kind {
        ModelKind::Oracle => {
            if args.resume.is_some() {
                return Err(CliError::usage("--resume applies to trainable models only"));
            }
            build_oracle(&cfg.task, &cfg.model)?;
            let rng = cfg.stream(Purpose::Training);
            Checkpoint {
                config_hash: cfg.hash(),
                task: cfg.task.clone(),
                model: cfg.model.clone(),
                step: 0,
                rng_seed: rng.seed(),
                rng_counter: rng.counter(),
                blocks: Vec::new(),
                params: Vec::new(),
                optimizer: None,
            }
        }
        ModelKind::Toy => {
            let adamw = cfg.train.adamw();
            let (mut policy, mut opt, mut stream) = match &args.resume {
                Some(path) => {
                    let ck = Checkpoint::load(path)?;
                    check_model(&ck, &cfg, path)?;
                    let Some(snapshot) = &ck.optimizer else {
                        return Err(CliError::usage(format!(
                            "{} has no optimizer state",
                            path.display()
                        )));
                    };
                    if snapshot.config != adamw {
                        return Err(CliError::usage(
                            "optimizer settings differ from the checkpoint being resumed",
                        ));
                    }
                    let LoadedPolicy::Toy(policy) = LoadedPolicy::from_checkpoint(&ck)? else {
                        unreachable!("toy config loads a toy policy")
                    };
                    (policy, snapshot.restore()?, ck.rng())
                }
                None => {
                    let policy =
                        ToyPolicy::new(cfg.model.toy.clone(), cfg.derived_seed(Purpose::ModelInit))
                            .map_err(CliError::config_from)?;
                    let opt = OptState::new(adamw, policy.param_count())
                        .map_err(CliError::config_from)?;
                    (policy, opt, cfg.stream(Purpose::Training))
                }
            };
            let pairs: Vec<_> = data.train.iter().map(|e| e.training_pair()).collect();
            let plan = TrainPlan {
                steps: cfg.train.steps,
                batch_size: cfg.train.batch_size,
                settings: cfg.train.settings.clone(),
            };
            fit(
                &mut policy,
                &pairs,
                &plan,
                &mut opt,
                &mut stream,
                |step, loss| log.push((step, loss, adamw.learning_rate(step - 1))),
            )
            .map_err(core)?;
            Checkpoint {
                config_hash: cfg.hash(),
                task: cfg.task.clone(),
                model: cfg.model.clone(),
                step: opt.step_count(),
                rng_seed: stream.seed(),
                rng_counter: stream.counter(),
                blocks: policy.block_lengths(),
                params: policy.to_flat(),
                optimizer: Some(OptimizerSnapshot::capture(&opt)),
            }
        }
    };

    let mut out = OutputSet::new(&common.out)?;
    out.write(CHECKPOINT_FILE, &checkpoint.to_bytes())?;
    out.write(TRAIN_LOG_FILE, &train_log(&cfg, &log))?;
    out.commit()
}

pub struct CalibrateArgs {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
}

fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<(LoadedPolicy, String), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::missing(path, e))?;
    let ck = Checkpoint::from_bytes(&bytes).map_err(|e| e.context(&path.display().to_string()))?;
    check_model(&ck, cfg, path)?;
    Ok((LoadedPolicy::from_checkpoint(&ck)?, sha256_hex(&bytes)))
}

pub fn calibrate(common: &Common, args: &CalibrateArgs) -> Result<Vec<PathBuf>, CliError> {
    let cfg = common.load()?;
    let ck_path = common.input(&args.checkpoint, CHECKPOINT_FILE);
    let (policy, checkpoint_hash) = load_checkpoint(&cfg, &ck_path)?;
    let data = DatasetFile::load(&common.input(&args.data, DATASET_FILE), &cfg.task)?;
    let observations: Vec<_> = data
        .calibration
        .iter()
        .map(|e| e.observation.clone())
        .collect();
    let cal = &cfg.calibration;
    let root = cfg.stream(Purpose::Calibration);

    let mut matrices: Vec<(String, DiscrepancyMatrix)> = Vec::new();
    let mut protocols = Vec::new();
    for &protocol in &cfg.runtime.protocols {
        let label = protocol_label(protocol);
        let taps = with_policy!(&policy, p => p.eligible_taps().to_vec());
        let v = with_policy!(&policy, p => collect_discrepancies(p, &observations, &taps, cal.metric, protocol, &root))
            .map_err(core)?;
        let mut schedules = Vec::new();
        for &c in &cal.c_grid {
            let dist = exit_distribution(cal.family, c, v.exits(), cal.spread)
                .map_err(CliError::config_from)?;
            let result = calibrate_thresholds(&v, &dist, cal.mode).map_err(core)?;
            let stats = expected_exit_stats(&dist, &taps, &cfg.cost, protocol).map_err(core)?;
            schedules.push(ScheduleEntry {
                c,
                p: dist.probabilities().to_vec(),
                thresholds: result.schedule.thresholds.clone(),
                realized: result.realized,
                expected_layer: stats.expected_layer,
                expected_gflops: stats.expected_gflops,
                warnings: result.warnings,
            });
        }
        protocols.push(ProtocolCalibration {
            label: label.clone(),
            protocol,
            taps,
            v: VSummary::of(&v),
            schedules,
        });
        matrices.push((label, v));
    }
    let file = CalibrationFile {
        format_version: FORMAT_VERSION,
        config_hash: cfg.hash(),
        checkpoint_hash,
        metric: cal.metric,
        mode: cal.mode,
        family: cal.family,
        spread: cal.spread,
        samples: observations.len(),
        protocols,
    };
    let sidecar: Vec<(String, &DiscrepancyMatrix)> =
        matrices.iter().map(|(l, v)| (l.clone(), v)).collect();
    let mut out = OutputSet::new(&common.out)?;
    out.write(CALIBRATION_FILE, file.to_text()?.as_bytes())?;
    out.write(
        CALIBRATION_V_FILE,
        &v_sidecar_csv(&file.config_hash, &sidecar)?,
    )?;
    out.commit()
}

pub struct BenchArgs {
    pub checkpoint: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub data: Option<PathBuf>,
}

pub fn bench(common: &Common, args: &BenchArgs) -> Result<Vec<PathBuf>, CliError> {
    let cfg = common.load()?;
    let ck_path = common.input(&args.checkpoint, CHECKPOINT_FILE);
    let (policy, checkpoint_hash) = load_checkpoint(&cfg, &ck_path)?;
    let cal_path = common.input(&args.calibration, CALIBRATION_FILE);
    let (calibration, calibration_hash) = CalibrationFile::load(&cal_path)?;
    if calibration.checkpoint_hash != checkpoint_hash {
        return Err(CliError::usage(format!(
            "{} was calibrated against a different checkpoint than {}",
            cal_path.display(),
            ck_path.display()
        )));
    }
    let data = DatasetFile::load(&common.input(&args.data, DATASET_FILE), &cfg.task)?;

    let mut configs = Vec::new();
    for pc in &calibration.protocols {
        for entry in &pc.schedules {
            let schedule = calibration.schedule(pc, entry)?;
            configs.push(BenchConfig::early_exit(
                format!("ee-{}-c{}", pc.label, entry.c),
                pc.protocol,
                schedule,
                Some(entry.c),
            ));
        }
    }
    let root = cfg.stream(Purpose::Bench);
    let report = with_policy!(&policy, p => run_benchmark(p, &configs, &data.eval, &cfg.task, &cfg.cost, &root))
        .map_err(core)?;

    let hash = cfg.hash();
    let mut table = csv_stamp(&hash).into_bytes();
    write_report_csv(&report, &mut table).map_err(core)?;
    let mut hist = csv_stamp(&hash).into_bytes();
    write_histogram_csv(&report, &mut hist).map_err(core)?;
    let json = BenchFile {
        format_version: FORMAT_VERSION,
        config_hash: hash,
        checkpoint_hash,
        calibration_hash,
        report,
    };
    let mut out = OutputSet::new(&common.out)?;
    out.write(BENCH_CSV_FILE, &table)?;
    out.write(BENCH_HIST_FILE, &hist)?;
    out.write(BENCH_JSON_FILE, &json.to_bytes())?;
    out.commit()
}

pub fn report(input: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let file = BenchFile::load(&input.join(BENCH_JSON_FILE))?;
    let mut summary = csv_stamp(&file.config_hash).into_bytes();
    write_summary_csv(&file.report, &mut summary).map_err(core)?;
    let mut out = OutputSet::new(out_dir)?;
    out.write(SUMMARY_FILE, &summary)?;
    out.commit()
}
