use std::sync::Arc;

use exitflow_core::backbone::{
    strided_taps, HeadProtocol, LayerTappedPolicy, Observation, OracleConfig, OracleLayeredPolicy,
};
use exitflow_core::calibration::{
    calibrate_thresholds, collect_discrepancies, exit_distribution, DiscrepancyMetric, ExitFamily,
    QuantileMode,
};
use exitflow_core::flowcore::GaussianMixture;
use exitflow_core::numkernel::RngStream;
use exitflow_core::runtime::{account_cost, episode_stream, infer_early_exit, CostModel};
use proptest::prelude::*;

/// Oracle whose target is a single Gaussian centred on the observation's visual block.
fn oracle(layers: usize, decay: f64, scale: f64, all_taps: bool) -> OracleLayeredPolicy {
    let cfg = OracleConfig {
        layers,
        tap_stride: 2,
        horizon: 2,
        action_dim: 2,
        decay,
        scale,
        seed: 11,
    };
    let map = Arc::new(|obs: &Observation| GaussianMixture::single(obs.visual.clone(), 0.2));
    let policy = OracleLayeredPolicy::new(cfg, map).unwrap();
    if all_taps {
        policy.with_taps((1..=layers).collect()).unwrap()
    } else {
        policy
    }
}

fn observations(seed: u64, n: usize) -> Vec<Observation> {
    let mut rng = RngStream::new(seed);
    (0..n)
        .map(|_| Observation {
            visual: (0..4).map(|_| 2.0 * rng.uniform() - 1.0).collect(),
            state: vec![],
            instruction: 0,
        })
        .collect()
}

const FM2: HeadProtocol = HeadProtocol::Fm {
    n_steps: 2,
    warm_start: true,
};

#[test]
fn zero_scale_mlp_discrepancies_vanish() {
    let policy = oracle(12, 0.5, 0.0, false);
    let obs = observations(1, 50);
    let v = collect_discrepancies(
        &policy,
        &obs,
        &strided_taps(policy.config().layers, 2),
        DiscrepancyMetric::L2,
        HeadProtocol::Mlp,
        &RngStream::new(0),
    )
    .unwrap();
    assert!(v.rows().iter().flatten().all(|&x| x == 0.0));
}

#[test]
fn single_sample_shape() {
    let policy = oracle(12, 0.5, 1.0, false);
    let taps = policy.eligible_taps().to_vec();
    let v = collect_discrepancies(
        &policy,
        &observations(2, 1),
        &taps,
        DiscrepancyMetric::L2,
        FM2,
        &RngStream::new(3),
    )
    .unwrap();
    assert_eq!((v.exits(), v.samples()), (taps.len() - 1, 1));
}

#[test]
fn discrepancies_decay_geometrically() {
    let gamma = 0.5;
    let policy = oracle(10, gamma, 1.0, true);
    let taps = policy.eligible_taps().to_vec();
    let v = collect_discrepancies(
        &policy,
        &observations(4, 400),
        &taps,
        DiscrepancyMetric::L2,
        HeadProtocol::Mlp,
        &RngStream::new(0),
    )
    .unwrap();
    // Least-squares slope of log row mean against layer index.
    let means = v.row_means();
    let xs: Vec<f64> = taps[1..].iter().map(|&t| t as f64).collect();
    let ys: Vec<f64> = means.iter().map(|m| m.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let slope = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
    let ratio = slope.exp();
    assert!((ratio - gamma).abs() <= 0.15, "fitted decay ratio {ratio}");
}

fn replay(protocol: HeadProtocol) {
    let policy = oracle(16, 0.5, 1.0, false);
    let taps = policy.eligible_taps().to_vec();
    let obs = observations(5, 600);
    let root = RngStream::new(77);
    let v = collect_discrepancies(&policy, &obs, &taps, DiscrepancyMetric::L2, protocol, &root)
        .unwrap();
    let p = exit_distribution(ExitFamily::Exponential, 0.7, v.exits(), None).unwrap();
    let cal = calibrate_thresholds(&v, &p, QuantileMode::Renormalized).unwrap();
    let cost = CostModel::default();
    for (n, o) in obs.iter().enumerate() {
        let trace = infer_early_exit(
            &policy,
            o,
            &cal.schedule,
            protocol,
            &cost,
            episode_stream(&root, n),
        )
        .unwrap();
        assert_eq!(trace.exit_index - 1, cal.assignment[n], "sample {n}");
        assert_eq!(trace.gflops, account_cost(&trace, &cost));
    }
}

#[test]
fn deployment_replays_calibration_partition_mlp() {
    replay(HeadProtocol::Mlp);
}

#[test]
fn deployment_replays_calibration_partition_fm_warm() {
    replay(FM2);
    replay(HeadProtocol::Fm {
        n_steps: 3,
        warm_start: false,
    });
}

#[test]
fn fresh_samples_realize_target_histogram() {
    let policy = oracle(16, 0.5, 1.0, false);
    let taps = policy.eligible_taps().to_vec();
    let calib = observations(6, 10_000);
    let fresh = observations(7, 10_000);
    let v = collect_discrepancies(
        &policy,
        &calib,
        &taps,
        DiscrepancyMetric::L2,
        HeadProtocol::Mlp,
        &RngStream::new(0),
    )
    .unwrap();
    let p = exit_distribution(ExitFamily::Exponential, 0.8, v.exits(), None).unwrap();
    let cal = calibrate_thresholds(&v, &p, QuantileMode::Renormalized).unwrap();
    let mut hist = vec![0usize; v.exits()];
    let cost = CostModel::default();
    for o in &fresh {
        let t = infer_early_exit(
            &policy,
            o,
            &cal.schedule,
            HeadProtocol::Mlp,
            &cost,
            RngStream::new(0),
        )
        .unwrap();
        hist[t.exit_index - 1] += 1;
    }
    for (h, target) in hist.iter().zip(p.probabilities()) {
        let frac = *h as f64 / fresh.len() as f64;
        assert!((frac - target).abs() <= 0.03, "{frac} vs {target}");
    }
}

#[test]
fn cost_is_weakly_monotone_in_exit_layer() {
    let policy = oracle(16, 0.5, 1.0, false);
    let taps = policy.eligible_taps().to_vec();
    let obs = observations(8, 300);
    let root = RngStream::new(1);
    for protocol in [HeadProtocol::Mlp, FM2] {
        let v = collect_discrepancies(&policy, &obs, &taps, DiscrepancyMetric::L2, protocol, &root)
            .unwrap();
        let p = exit_distribution(ExitFamily::Exponential, 1.0, v.exits(), None).unwrap();
        let cal = calibrate_thresholds(&v, &p, QuantileMode::Renormalized).unwrap();
        let cost = CostModel::default();
        let mut traces: Vec<_> = obs
            .iter()
            .enumerate()
            .map(|(n, o)| {
                infer_early_exit(
                    &policy,
                    o,
                    &cal.schedule,
                    protocol,
                    &cost,
                    episode_stream(&root, n),
                )
                .unwrap()
            })
            .collect();
        traces.sort_by_key(|t| t.exit_layer);
        for w in traces.windows(2) {
            assert!(w[0].gflops <= w[1].gflops);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scaling_thresholds_up_never_delays_exit(seed in any::<u64>(), lambda in 1.0f64..4.0, fm in any::<bool>()) {
        let policy = oracle(12, 0.5, 1.0, false);
        let taps = policy.eligible_taps().to_vec();
        let protocol = if fm { FM2 } else { HeadProtocol::Mlp };
        let obs = observations(seed, 24);
        let root = RngStream::new(seed ^ 0x5eed);
        let v = collect_discrepancies(&policy, &obs[..12], &taps, DiscrepancyMetric::L2, protocol, &root).unwrap();
        let p = exit_distribution(ExitFamily::Exponential, 1.0, v.exits(), None).unwrap();
        let schedule = calibrate_thresholds(&v, &p, QuantileMode::Renormalized).unwrap().schedule;
        let scaled = schedule.scaled(lambda);
        let cost = CostModel::default();
        for (n, o) in obs.iter().enumerate() {
            let a = infer_early_exit(&policy, o, &schedule, protocol, &cost, episode_stream(&root, n)).unwrap();
            let b = infer_early_exit(&policy, o, &scaled, protocol, &cost, episode_stream(&root, n)).unwrap();
            prop_assert!(b.exit_layer <= a.exit_layer);
            prop_assert!(b.gflops <= a.gflops);
        }
    }
}
