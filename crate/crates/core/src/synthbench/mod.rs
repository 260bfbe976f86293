//! Synthetic reaching task, benchmark orchestration and report files.

mod bench;
mod report;
mod task;

pub use bench::{
    exact_flow_reference, flow_fidelity, mandatory_baselines, run_benchmark, BenchConfig,
    BenchReport, BenchRow, FlowFidelity,
};
pub use report::{
    read_report_csv, read_report_json, write_histogram_csv, write_report_csv, write_report_json,
    write_summary_csv, ParsedReport, HISTOGRAM_COLUMNS, REPORT_COLUMNS, SUMMARY_COLUMNS,
};
pub use task::{
    chunk_error, gen_dataset, sample_episode, task_mixture_map, task_success, Box2, Episode,
    Interval, SyntheticTaskSpec,
};

use crate::backbone::{OracleConfig, OracleLayeredPolicy};
use crate::error::Result;

/// The analytic layered oracle for a task: two arc components of standard deviation
/// `std`, with the horizon and action dimension taken from the task.
pub fn task_oracle(
    spec: &SyntheticTaskSpec,
    config: OracleConfig,
    std: f64,
) -> Result<OracleLayeredPolicy> {
    let config = OracleConfig {
        horizon: spec.horizon,
        action_dim: spec.action_dim,
        ..config
    };
    OracleLayeredPolicy::new(config, task_mixture_map(spec, std)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{HeadKind, HeadProtocol, LayerTappedPolicy};
    use crate::calibration::{DiscrepancyMetric, ExitSchedule};
    use crate::numkernel::RngStream;
    use crate::runtime::CostModel;

    fn setup() -> (SyntheticTaskSpec, OracleLayeredPolicy, Vec<Episode>) {
        let spec = SyntheticTaskSpec::default();
        let oracle = task_oracle(&spec, OracleConfig::default(), 0.02).unwrap();
        let data = gen_dataset(&spec, 4, 64).unwrap();
        (spec, oracle, data)
    }

    fn grid(oracle: &OracleLayeredPolicy) -> Vec<BenchConfig> {
        let taps = oracle.eligible_taps().to_vec();
        let fm = HeadProtocol::Fm {
            n_steps: 2,
            warm_start: true,
        };
        vec![
            BenchConfig::early_exit(
                "always",
                fm,
                ExitSchedule::always_exit(taps.clone(), DiscrepancyMetric::L2).unwrap(),
                None,
            ),
            BenchConfig::early_exit(
                "never",
                fm,
                ExitSchedule::never_exit(taps, DiscrepancyMetric::L2).unwrap(),
                None,
            ),
        ]
    }

    #[test]
    fn baselines_are_added_and_costs_ordered() {
        let (spec, oracle, data) = setup();
        let report = run_benchmark(
            &oracle,
            &grid(&oracle),
            &data,
            &spec,
            &CostModel::default(),
            &RngStream::new(1),
        )
        .unwrap();
        let ids: Vec<&str> = report.rows.iter().map(|r| r.config_id.as_str()).collect();
        assert_eq!(
            ids,
            ["full-mlp", "full-fm-10", "full-fm-2", "always", "never"]
        );
        let row = |id: &str| report.rows.iter().find(|r| r.config_id == id).unwrap();
        assert!(row("always").mean_gflops < row("never").mean_gflops);
        assert_eq!(row("always").histogram[0], (4, 64));
        assert_eq!(row("never").histogram.last().unwrap(), &(28, 64));
        // Reductions are recomputable from the cost columns.
        let full = row("full-fm-2");
        for r in [row("always"), row("never")] {
            let expected = 100.0 * (1.0 - r.mean_gflops / full.mean_gflops);
            assert_eq!(r.reduction_pct, expected);
            assert!(r.mean_backbone_gflops <= full.mean_backbone_gflops);
        }
        assert_eq!(full.reduction_pct, 0.0);
        assert_eq!(row("never").total_denoising_steps, 64 * 14 * 2);
        // The exact oracle at full depth solves the task.
        assert!(
            row("full-fm-10").success_rate > 0.95,
            "{}",
            row("full-fm-10").success_rate
        );
    }

    #[test]
    fn reports_are_reproducible_and_roundtrip() {
        let (spec, oracle, data) = setup();
        let cost = CostModel::default();
        let run = || {
            run_benchmark(
                &oracle,
                &grid(&oracle),
                &data,
                &spec,
                &cost,
                &RngStream::new(2),
            )
            .unwrap()
        };
        let report = run();
        assert_eq!(report, run());

        let mut table = Vec::new();
        let mut hist = Vec::new();
        write_report_csv(&report, &mut table).unwrap();
        write_histogram_csv(&report, &mut hist).unwrap();
        let parsed = read_report_csv(&table[..], &hist[..]).unwrap();
        assert_eq!(parsed.rows, report.rows);
        let commented = [b"# format_version=1\n".as_slice(), &table].concat();
        assert_eq!(read_report_csv(&commented[..], &hist[..]).unwrap(), parsed);
        assert_eq!(parsed.tube_radius, Some(spec.tube_radius));
        let text = String::from_utf8(table).unwrap();
        let widths: Vec<usize> = text.lines().map(|l| l.split(',').count()).collect();
        assert!(
            widths.iter().all(|&w| w == REPORT_COLUMNS.len()),
            "{widths:?}"
        );

        let mut json = Vec::new();
        write_report_json(&report, &mut json).unwrap();
        assert_eq!(read_report_json(&json[..]).unwrap(), report);
    }

    #[test]
    fn empty_report_is_header_only() {
        let report = BenchReport {
            spec: SyntheticTaskSpec::default(),
            cost: CostModel::default(),
            rows: vec![],
        };
        let mut table = Vec::new();
        write_report_csv(&report, &mut table).unwrap();
        assert_eq!(
            String::from_utf8(table.clone()).unwrap().trim_end(),
            REPORT_COLUMNS.join(",")
        );
        let mut hist = Vec::new();
        write_histogram_csv(&report, &mut hist).unwrap();
        assert!(read_report_csv(&table[..], &hist[..])
            .unwrap()
            .rows
            .is_empty());
        assert!(read_report_csv(&b"a,b\n"[..], &hist[..]).is_err());
    }

    #[test]
    fn failures_are_recorded_per_row() {
        let (spec, oracle, mut data) = setup();
        data[3].observation.visual.pop();
        let report = run_benchmark(
            &oracle,
            &grid(&oracle),
            &data,
            &spec,
            &CostModel::default(),
            &RngStream::new(1),
        )
        .unwrap();
        for row in &report.rows {
            assert_eq!(row.failures, 1);
            assert!(row.error.is_some());
            assert_eq!(row.histogram.iter().map(|h| h.1).sum::<usize>(), 63);
        }
        assert!(run_benchmark(
            &oracle,
            &[],
            &data,
            &spec,
            &CostModel::default(),
            &RngStream::new(1)
        )
        .is_err());
    }

    #[test]
    fn fidelity_counts_steps_and_is_deterministic() {
        let (_, oracle, data) = setup();
        let taps = oracle.eligible_taps().to_vec();
        let never = ExitSchedule::never_exit(taps.clone(), DiscrepancyMetric::L2).unwrap();
        let warm = HeadProtocol::Fm {
            n_steps: 2,
            warm_start: true,
        };
        let root = RngStream::new(3);
        let a = flow_fidelity(
            &oracle,
            &data,
            &never,
            warm,
            &CostModel::default(),
            &root,
            64,
        )
        .unwrap();
        assert_eq!(a.total_denoising_steps, 64 * 14 * 2);
        assert_eq!(
            a,
            flow_fidelity(
                &oracle,
                &data,
                &never,
                warm,
                &CostModel::default(),
                &root,
                64
            )
            .unwrap()
        );
        assert!(flow_fidelity(
            &oracle,
            &data,
            &never,
            HeadProtocol::Mlp,
            &CostModel::default(),
            &root,
            64
        )
        .is_err());
        assert_eq!(HeadKind::Fm, warm.kind());
    }
}
