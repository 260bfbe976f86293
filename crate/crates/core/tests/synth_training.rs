use exitflow_core::backbone::{
    fit, train_step, ExitSupervision, HeadKind, HeadProtocol, LayerTappedPolicy, ToyPolicy,
    ToyPolicyConfig, TrainPlan, TrainSettings,
};
use exitflow_core::calibration::{DiscrepancyMetric, ExitSchedule};
use exitflow_core::numkernel::{AdamWConfig, OptState, Parameterized, RngStream};
use exitflow_core::runtime::CostModel;
use exitflow_core::synthbench::{gen_dataset, run_benchmark, BenchConfig, SyntheticTaskSpec};

fn optimizer(policy: &ToyPolicy, steps: u64) -> OptState {
    let cfg = AdamWConfig {
        base_lr: 3e-3,
        warmup_steps: steps / 20,
        total_steps: steps,
        ..AdamWConfig::default()
    };
    OptState::new(cfg, policy.param_count()).unwrap()
}

#[test]
fn fixed_batch_loss_trends_down_for_both_heads() {
    let spec = SyntheticTaskSpec::default();
    let batch: Vec<_> = gen_dataset(&spec, 21, 32)
        .unwrap()
        .iter()
        .map(|e| e.training_pair())
        .collect();
    for head in [HeadKind::Mlp, HeadKind::Fm] {
        let cfg = ToyPolicyConfig {
            heads: vec![head],
            ..ToyPolicyConfig::default()
        };
        let mut policy = ToyPolicy::new(cfg, 4).unwrap();
        let settings = TrainSettings {
            head,
            mode: ExitSupervision::AllExits,
            state_mask_prob: 0.1,
            ..TrainSettings::default()
        };
        let mut opt = optimizer(&policy, 200);
        let mut stream = RngStream::new(8);
        let losses: Vec<f64> = (0..200)
            .map(|_| train_step(&mut policy, &batch, &settings, &mut opt, &mut stream).unwrap())
            .collect();
        // The 20-step moving average, sampled every 20 steps, trends down (5% noise slack).
        let windows: Vec<f64> = losses
            .chunks(20)
            .map(|w| w.iter().sum::<f64>() / 20.0)
            .collect();
        for w in windows.windows(2) {
            assert!(w[1] < 1.05 * w[0], "{head:?}: {windows:?}");
        }
        assert!(windows[9] < 0.5 * windows[0], "{head:?}: {windows:?}");
    }
}

#[test]
fn fit_resumes_to_the_same_parameters() {
    let spec = SyntheticTaskSpec::default();
    let data: Vec<_> = gen_dataset(&spec, 1, 256)
        .unwrap()
        .iter()
        .map(|e| e.training_pair())
        .collect();
    let plan = TrainPlan {
        steps: 40,
        batch_size: 16,
        settings: TrainSettings::default(),
    };
    let fresh = ToyPolicy::new(ToyPolicyConfig::default(), 3).unwrap();

    let mut straight = fresh.clone();
    let mut opt = optimizer(&straight, 40);
    let mut stream = RngStream::new(5);
    let all = fit(
        &mut straight,
        &data,
        &plan,
        &mut opt,
        &mut stream,
        |_, _| {},
    )
    .unwrap();
    assert_eq!(all.len(), 40);

    let mut resumed = fresh;
    let mut opt2 = optimizer(&resumed, 40);
    let mut stream2 = RngStream::new(5);
    let half = TrainPlan {
        steps: 25,
        ..plan.clone()
    };
    fit(
        &mut resumed,
        &data,
        &half,
        &mut opt2,
        &mut stream2,
        |_, _| {},
    )
    .unwrap();
    let mut stream3 = RngStream::at(stream2.seed(), stream2.counter());
    let mut seen = Vec::new();
    fit(
        &mut resumed,
        &data,
        &plan,
        &mut opt2,
        &mut stream3,
        |step, _| seen.push(step),
    )
    .unwrap();
    assert_eq!(seen, (26..=40).collect::<Vec<u64>>());
    assert_eq!(resumed.to_flat(), straight.to_flat());
}

#[test]
fn deeper_taps_are_not_worse_after_training() {
    let spec = SyntheticTaskSpec::default();
    let data: Vec<_> = gen_dataset(&spec, 1, 2048)
        .unwrap()
        .iter()
        .map(|e| e.training_pair())
        .collect();
    let eval = gen_dataset(&spec, 2, 500).unwrap();
    let mut policy = ToyPolicy::new(ToyPolicyConfig::default(), 7).unwrap();
    let plan = TrainPlan {
        steps: 1200,
        batch_size: 64,
        settings: TrainSettings::default(),
    };
    let mut opt = optimizer(&policy, plan.steps);
    fit(
        &mut policy,
        &data,
        &plan,
        &mut opt,
        &mut RngStream::new(9),
        |_, _| {},
    )
    .unwrap();

    let taps = policy.eligible_taps().to_vec();
    let configs: Vec<BenchConfig> = taps
        .iter()
        .map(|&l| {
            let prefix: Vec<usize> = taps.iter().copied().filter(|&t| t <= l).collect();
            let schedule = ExitSchedule::never_exit(prefix, DiscrepancyMetric::L2).unwrap();
            BenchConfig::early_exit(format!("tap{l}"), HeadProtocol::Mlp, schedule, None)
        })
        .collect();
    let report = run_benchmark(
        &policy,
        &configs,
        &eval,
        &spec,
        &CostModel::default(),
        &RngStream::new(0),
    )
    .unwrap();
    let errors: Vec<f64> = report
        .rows
        .iter()
        .filter(|r| r.config_id.starts_with("tap"))
        .map(|r| r.mean_chunk_error)
        .collect();
    for w in errors.windows(2) {
        // Soft check: allow 5% slack for noise between neighbouring taps.
        assert!(w[1] <= 1.05 * w[0], "{errors:?}");
    }
    assert!(
        errors.last().unwrap() < errors.first().unwrap(),
        "{errors:?}"
    );
}
