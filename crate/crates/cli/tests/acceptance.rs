//! Acceptance suite: one pass/fail line per criterion, nonzero exit on any failure.

mod common;

use std::time::{Duration, Instant};

use exitflow_cli::artifact::BenchFile;
use exitflow_cli::config::RunConfig;
use exitflow_cli::policy::build_oracle;
use exitflow_core::backbone::{
    batch_loss_and_grad, ExitSupervision, HeadKind, HeadProtocol, LayerChoice, LayerTappedPolicy,
    Observation, ToyPolicy, ToyPolicyConfig, TrainSettings,
};
use exitflow_core::calibration::{
    calibrate_thresholds, collect_discrepancies, exit_distribution, DiscrepancyMatrix,
    DiscrepancyMetric, ExitDistribution, ExitFamily, ExitSchedule, QuantileMode,
};
use exitflow_core::flowcore::{
    euler_integrate, ActionChunk, GaussianMixture, MixtureComponent, MixtureField,
};
use exitflow_core::numkernel::{grad_check_model, Activation, RngStream};
use exitflow_core::runtime::{CostModel, WorkCounts};
use exitflow_core::synthbench::{flow_fidelity, gen_dataset, BenchRow};

type Outcome = Result<String, String>;

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol
}

fn oracle_config() -> RunConfig {
    RunConfig::load(&common::shipped_config("oracle.toml")).expect("shipped oracle config")
}

fn cost_model_fidelity() -> Outcome {
    let cost = CostModel::default();
    let layers = cost.backbone(28);
    let steps = 10.0 * cost.fm_step;
    let mlp = cost.account(&WorkCounts {
        head: HeadKind::Mlp,
        layers_run: 28,
        head_evals: 1,
        denoising_steps: 0,
        comparisons: 0,
    });
    let detail = format!(
        "28 layers = {layers:.2} GFLOPs, 10 FM steps = {steps:.3} GFLOPs, full MLP = {mlp:.2}"
    );
    if within(layers, 9061.01, 9061.01 * 1e-3)
        && within(steps, 4.93, 4.93 * 2e-4)
        && within(layers, 9061.08, 1e-6)
    {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Taps 2, 4, ..., 18 give K = 8 exits.
fn calibration_matrix(n: usize) -> DiscrepancyMatrix {
    let mut cfg = oracle_config();
    cfg.model.oracle.layers = 18;
    let oracle = build_oracle(&cfg.task, &cfg.model).unwrap();
    let obs: Vec<Observation> = gen_dataset(&cfg.task, 101, n)
        .unwrap()
        .into_iter()
        .map(|e| e.observation)
        .collect();
    let taps = oracle.eligible_taps().to_vec();
    collect_discrepancies(
        &oracle,
        &obs,
        &taps,
        DiscrepancyMetric::L2,
        HeadProtocol::Mlp,
        &RngStream::new(5),
    )
    .unwrap()
}

fn proportion_matching() -> Outcome {
    let v = calibration_matrix(20_000);
    let p = exit_distribution(ExitFamily::Exponential, 0.5, v.exits(), None).unwrap();
    let cal = calibrate_thresholds(&v, &p, QuantileMode::Renormalized).unwrap();
    let worst = cal
        .realized
        .iter()
        .zip(p.probabilities())
        .map(|(r, t)| (r - t).abs())
        .fold(0.0, f64::max);
    let detail = format!("K = {}, max |realized - target| = {worst:.5}", v.exits());
    if v.exits() == 8 && worst <= 0.015 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Reference filtered-quantile calibration: at each exit, the smallest candidate threshold
/// whose exit count among the survivors reaches `p_k · |I|`.
fn enumerate_literal(v: &[Vec<f64>], p: &[f64]) -> Vec<usize> {
    let n = v[0].len();
    let mut assignment = vec![v.len() - 1; n];
    let mut remaining: Vec<usize> = (0..n).collect();
    for k in 0..v.len() - 1 {
        let m = remaining.len() as f64;
        if remaining.is_empty() || p[k] <= 0.0 {
            continue;
        }
        let mut best = f64::INFINITY;
        for &cand in &remaining {
            let t = v[k][cand];
            let count = remaining.iter().filter(|&&i| v[k][i] <= t).count() as f64;
            if count >= p[k] * m - 1e-9 * m && t < best {
                best = t;
            }
        }
        remaining.retain(|&i| {
            let exits = v[k][i] <= best;
            if exits {
                assignment[i] = k;
            }
            !exits
        });
    }
    assignment
}

fn next_permutation(xs: &mut [f64]) -> bool {
    let Some(i) = (1..xs.len()).rev().find(|&i| xs[i - 1] < xs[i]) else {
        return false;
    };
    let j = (i..xs.len()).rev().find(|&j| xs[j] > xs[i - 1]).unwrap();
    xs.swap(i - 1, j);
    xs[i..].reverse();
    true
}

fn check_literal(rows: Vec<Vec<f64>>, ps: &[Vec<f64>], share: bool) -> Result<usize, String> {
    let n = rows[0].len();
    let v = DiscrepancyMatrix::new(vec![2, 4, 6], DiscrepancyMetric::L2, rows.clone()).unwrap();
    for p in ps {
        let dist = ExitDistribution::from_probabilities(p.clone()).unwrap();
        let cal = calibrate_thresholds(&v, &dist, QuantileMode::Literal).unwrap();
        let expected = enumerate_literal(&rows, p);
        if cal.assignment != expected {
            return Err(format!("mismatch for V = {rows:?}, p = {p:?}"));
        }
        let exited = expected.iter().filter(|&&a| a == 0).count() as f64 / n as f64;
        if share && (exited - p[0]).abs() > 1.0 / n as f64 + 1e-12 {
            return Err(format!(
                "first-exit share {exited} vs p = {} for V = {rows:?}",
                p[0]
            ));
        }
    }
    Ok(ps.len())
}

fn literal_semantics() -> Outcome {
    const GRID: [f64; 3] = [0.0, 0.1, 0.2];
    let ps: Vec<Vec<f64>> = (0..=8)
        .map(|e| vec![e as f64 / 8.0, 1.0 - e as f64 / 8.0])
        .collect();
    let mut rng = RngStream::new(17);
    let mut cases = 0;
    for n in 1..=8usize {
        let exhaustive = GRID.len().pow(n as u32);
        for code in 0..exhaustive {
            let mut c = code;
            let first: Vec<f64> = (0..n)
                .map(|_| {
                    let g = GRID[c % GRID.len()];
                    c /= GRID.len();
                    g
                })
                .collect();
            let second: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            cases += check_literal(vec![first, second], &ps, false)?;
        }
        // Without ties the first exit takes its share to within one sample.
        let mut first: Vec<f64> = (1..=n).map(|i| i as f64 / 10.0).collect();
        loop {
            let second: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            cases += check_literal(vec![first.clone(), second], &ps, true)?;
            if !next_permutation(&mut first) {
                break;
            }
        }
    }

    // The same rule on an oracle V: survivors of exit k leave at rate p_k within 1/|I|.
    let v = calibration_matrix(3_000);
    let p = exit_distribution(ExitFamily::Exponential, 0.5, v.exits(), None).unwrap();
    let cal = calibrate_thresholds(&v, &p, QuantileMode::Literal).unwrap();
    let mut survivors = v.samples();
    for k in 0..v.exits() - 1 {
        let exited = cal.assignment.iter().filter(|&&a| a == k).count();
        let frac = exited as f64 / survivors as f64;
        if (frac - p.probabilities()[k]).abs() > 1.0 / survivors as f64 + 1e-12 {
            return Err(format!(
                "oracle exit {k}: {frac} vs {}",
                p.probabilities()[k]
            ));
        }
        survivors -= exited;
    }
    Ok(format!(
        "{cases} K=2 enumerations with N <= 8 exact; oracle survivors within 1/|I|"
    ))
}

fn integrate(mix: &GaussianMixture, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut stream = RngStream::new(seed);
    (0..n)
        .map(|_| {
            let x0 = stream.draw_normal(mix.dim());
            euler_integrate(&MixtureField(mix), &x0, 256).unwrap()
        })
        .collect()
}

fn flow_sampling() -> Outcome {
    let single = GaussianMixture::single(vec![2.0, -1.0], 0.5).unwrap();
    let xs = integrate(&single, 10_000, 3);
    let n = xs.len() as f64;
    let mut report = Vec::new();
    let mut ok = true;
    for d in 0..2 {
        let mean = xs.iter().map(|x| x[d]).sum::<f64>() / n;
        let std = (xs.iter().map(|x| (x[d] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        ok &= within(mean, [2.0, -1.0][d], 0.05) && within(std, 0.5, 0.05);
        report.push(format!("mean[{d}] = {mean:.4}, std[{d}] = {std:.4}"));
    }
    let comp = |mean: f64| MixtureComponent {
        weight: 0.5,
        mean: vec![mean],
        std: 0.5,
    };
    let two = GaussianMixture::new(vec![comp(-3.0), comp(3.0)]).unwrap();
    let ys = integrate(&two, 10_000, 4);
    let upper = ys.iter().filter(|y| y[0] > 0.0).count() as f64 / ys.len() as f64;
    ok &= within(upper, 0.5, 0.03);
    report.push(format!("upper-mode share = {upper:.4}"));
    if ok {
        Ok(report.join(", "))
    } else {
        Err(report.join(", "))
    }
}

fn gradient_integrity() -> Outcome {
    let mut rng = RngStream::new(2024);
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for config in 0..20u64 {
        let layers = 2 + rng.below(3);
        let cfg = ToyPolicyConfig {
            layers,
            width: 3 + rng.below(5),
            embed_hidden: 2 + rng.below(5),
            block_hidden: 2 + rng.below(5),
            head_hidden: 2 + rng.below(6),
            fm_width: 2 + rng.below(4),
            fm_hidden: 2 + rng.below(4),
            time_features: 2 * (1 + rng.below(3)),
            state_dim: rng.below(3),
            horizon: 1 + rng.below(3),
            action_dim: 1 + rng.below(2),
            activation: Activation::Tanh,
            heads: vec![HeadKind::Mlp, HeadKind::Fm],
            tap_stride: 1 + rng.below(2),
            ..ToyPolicyConfig::default()
        };
        let policy = ToyPolicy::new(cfg.clone(), 100 + config).unwrap();
        let batch: Vec<(Observation, ActionChunk)> = (0..1 + rng.below(3))
            .map(|_| {
                let obs = Observation {
                    visual: rng.draw_normal(cfg.visual_dim),
                    state: rng.draw_normal(cfg.state_dim),
                    instruction: rng.below(cfg.instructions),
                };
                let target = ActionChunk::new(
                    cfg.horizon,
                    cfg.action_dim,
                    rng.draw_normal(cfg.chunk_len()),
                )
                .unwrap();
                (obs, target)
            })
            .collect();
        for head in [HeadKind::Mlp, HeadKind::Fm] {
            let settings = TrainSettings {
                head,
                mode: ExitSupervision::AllExits,
                state_mask_prob: 0.3,
                ..TrainSettings::default()
            };
            let seed = rng.next_u64();
            let eval = |m: &ToyPolicy| {
                batch_loss_and_grad(
                    m,
                    &batch,
                    &LayerChoice::All,
                    &settings,
                    &mut RngStream::new(seed),
                )
                .unwrap()
            };
            worst = worst.max(grad_check_model(&policy, eval));
            checks += 1;
        }
    }
    let detail = format!("{checks} checks over 20 configurations, max relative error {worst:.3e}");
    if worst < 1e-4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn euler_order() -> Outcome {
    let exact = std::f64::consts::E;
    let errs: Vec<f64> = [16, 32, 64, 128]
        .iter()
        .map(|&n| {
            (euler_integrate(&|x: &[f64], _: f64| x.to_vec(), &[1.0], n).unwrap()[0] - exact).abs()
        })
        .collect();
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[0] / w[1]).collect();
    let detail = format!("error ratios {ratios:.4?}");
    if ratios.iter().all(|r| (1.6..=2.4).contains(r)) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn row<'a>(rows: &'a [BenchRow], id: &str) -> Result<&'a BenchRow, String> {
    rows.iter()
        .find(|r| r.config_id == id)
        .ok_or_else(|| format!("bench row {id} missing"))
}

struct ToyRun {
    elapsed: Duration,
    rows: Vec<BenchRow>,
    hashes: Vec<(String, String)>,
}

fn toy_pipeline() -> Result<ToyRun, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    common::run_pipeline(&common::shipped_config("toy.toml"), dir.path())?;
    let elapsed = start.elapsed();
    let bench = BenchFile::load(&dir.path().join("bench.json")).map_err(|e| e.to_string())?;
    Ok(ToyRun {
        elapsed,
        rows: bench.report.rows,
        hashes: common::artifact_hashes(dir.path()),
    })
}

fn budget_accuracy(run: &ToyRun) -> Outcome {
    let full = row(&run.rows, "full-mlp")?;
    let early = row(&run.rows, "ee-mlp-c1")?;
    let gap = (early.success_rate - full.success_rate).abs();
    let detail = format!(
        "success {:.2}% vs full {:.2}%, backbone reduction {:.2}%, {} episodes, pipeline {:.1}s",
        100.0 * early.success_rate,
        100.0 * full.success_rate,
        early.backbone_reduction_pct,
        early.episodes,
        run.elapsed.as_secs_f64()
    );
    if early.backbone_reduction_pct >= 10.0
        && gap <= 0.03
        && early.episodes == 2000
        && run.elapsed.as_secs() < 600
    {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn warm_start() -> Outcome {
    let cfg = oracle_config();
    let oracle = build_oracle(&cfg.task, &cfg.model).unwrap();
    let episodes = gen_dataset(&cfg.task, 303, 1000).unwrap();
    let taps = oracle.eligible_taps().to_vec();
    let schedule = ExitSchedule::never_exit(taps, DiscrepancyMetric::L2).unwrap();
    let root = RngStream::new(12);
    let run = |n_steps, warm_start| {
        let protocol = HeadProtocol::Fm {
            n_steps,
            warm_start,
        };
        flow_fidelity(
            &oracle, &episodes, &schedule, protocol, &cfg.cost, &root, 256,
        )
        .unwrap()
    };
    let warm = run(2, true);
    let cold2 = run(2, false);
    let cold10 = run(10, false);
    let saving =
        100.0 * (1.0 - warm.total_denoising_steps as f64 / cold10.total_denoising_steps as f64);
    let detail = format!(
        "steps warm-2 {} vs cold-10 {} ({saving:.1}% fewer); reference error warm-2 {:.4} vs cold-2 {:.4}",
        warm.total_denoising_steps, cold10.total_denoising_steps, warm.mean_reference_error, cold2.mean_reference_error
    );
    if saving >= 60.0 && warm.mean_reference_error <= cold2.mean_reference_error {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn budget_monotonicity(run: &ToyRun) -> Outcome {
    let mut costs = Vec::new();
    for c in ["1", "0.7", "0.4", "0.1"] {
        costs.push(row(&run.rows, &format!("ee-mlp-c{c}"))?.mean_gflops);
    }
    let detail = format!("mean GFLOPs over c = 1.0, 0.7, 0.4, 0.1: {costs:.2?}");
    if costs.windows(2).all(|w| w[1] < w[0]) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn determinism(first: &ToyRun) -> Outcome {
    let second = toy_pipeline()?;
    if second.hashes != first.hashes {
        let differing: Vec<&str> = first
            .hashes
            .iter()
            .zip(&second.hashes)
            .filter(|(a, b)| a != b)
            .map(|(a, _)| a.0.as_str())
            .collect();
        return Err(format!("repeated run differs in {differing:?}"));
    }
    common::check_golden("toy", &first.hashes)?;
    Ok(format!(
        "{} artifacts identical across runs and equal to committed hashes",
        first.hashes.len()
    ))
}

fn main() {
    let toy = toy_pipeline();
    let toy_ref = || {
        toy.as_ref()
            .map_err(|e| format!("toy pipeline failed: {e}"))
    };
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("cost-model fidelity", Box::new(cost_model_fidelity)),
        (
            "renormalized proportion matching",
            Box::new(proportion_matching),
        ),
        ("literal-mode semantics", Box::new(literal_semantics)),
        ("flow-sampling correctness", Box::new(flow_sampling)),
        ("gradient integrity", Box::new(gradient_integrity)),
        ("Euler first order", Box::new(euler_order)),
        (
            "budget/accuracy at c = 1.0",
            Box::new(|| budget_accuracy(toy_ref()?)),
        ),
        ("warm-start denoising", Box::new(warm_start)),
        (
            "budget monotonicity",
            Box::new(|| budget_monotonicity(toy_ref()?)),
        ),
        (
            "end-to-end determinism",
            Box::new(|| determinism(toy_ref()?)),
        ),
    ];
    let limits = [
        1.0, 30.0, 60.0, 60.0, 600.0, 60.0, 600.0, 600.0, 600.0, 600.0,
    ];
    let mut failures = 0;
    for (i, ((name, check), limit)) in criteria.iter().zip(limits).enumerate() {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        let outcome = match outcome {
            Ok(detail) if secs > limit => {
                Err(format!("{detail} (took {secs:.1}s, limit {limit}s)"))
            }
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.2}s]", i + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL {:>2} {name}: {detail} [{secs:.2}s]", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failures,
        criteria.len()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
