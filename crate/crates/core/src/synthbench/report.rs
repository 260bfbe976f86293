use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::bench::{BenchReport, BenchRow};
use crate::backbone::HeadKind;
use crate::error::{Error, Result};

/// CSV columns of a report, in order.
pub const REPORT_COLUMNS: [&str; 20] = [
    "config_id",
    "head",
    "n_steps",
    "warm_start",
    "mode",
    "c",
    "episodes",
    "failures",
    "success_rate",
    "mean_chunk_error",
    "mean_gflops",
    "mean_backbone_gflops",
    "mean_exit_layer",
    "total_denoising_steps",
    "reduction_pct",
    "backbone_reduction_pct",
    "endpoint_radius",
    "tube_radius",
    "error",
    "histogram_bins",
];

/// Histogram sidecar columns.
pub const HISTOGRAM_COLUMNS: [&str; 3] = ["config_id", "exit_layer", "count"];

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    config_id: String,
    head: HeadKind,
    n_steps: usize,
    warm_start: bool,
    mode: String,
    c: Option<f64>,
    episodes: usize,
    failures: usize,
    success_rate: f64,
    mean_chunk_error: f64,
    mean_gflops: f64,
    mean_backbone_gflops: f64,
    mean_exit_layer: f64,
    total_denoising_steps: u64,
    reduction_pct: f64,
    backbone_reduction_pct: f64,
    endpoint_radius: f64,
    tube_radius: f64,
    error: Option<String>,
    histogram_bins: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct HistRow {
    config_id: String,
    exit_layer: usize,
    count: usize,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(format!("csv: {e}"))
}

/// Writes the per-configuration table. An empty report yields the header line only.
pub fn write_report_csv<W: Write>(report: &BenchReport, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(REPORT_COLUMNS).map_err(csv_err)?;
    for r in &report.rows {
        w.serialize(CsvRow {
            config_id: r.config_id.clone(),
            head: r.head,
            n_steps: r.n_steps,
            warm_start: r.warm_start,
            mode: r.mode.clone(),
            c: r.c,
            episodes: r.episodes,
            failures: r.failures,
            success_rate: r.success_rate,
            mean_chunk_error: r.mean_chunk_error,
            mean_gflops: r.mean_gflops,
            mean_backbone_gflops: r.mean_backbone_gflops,
            mean_exit_layer: r.mean_exit_layer,
            total_denoising_steps: r.total_denoising_steps,
            reduction_pct: r.reduction_pct,
            backbone_reduction_pct: r.backbone_reduction_pct,
            endpoint_radius: report.spec.endpoint_radius,
            tube_radius: report.spec.tube_radius,
            error: r.error.clone(),
            histogram_bins: r.histogram.len(),
        })
        .map_err(csv_err)?;
    }
    w.flush()
        .map_err(|e| Error::Parse(format!("csv flush: {e}")))
}

/// Writes the exit-layer histograms in long format, one line per (config, layer).
pub fn write_histogram_csv<W: Write>(report: &BenchReport, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(HISTOGRAM_COLUMNS).map_err(csv_err)?;
    for r in &report.rows {
        for &(exit_layer, count) in &r.histogram {
            w.serialize(HistRow {
                config_id: r.config_id.clone(),
                exit_layer,
                count,
            })
            .map_err(csv_err)?;
        }
    }
    w.flush()
        .map_err(|e| Error::Parse(format!("csv flush: {e}")))
}

/// Parsed CSV table: rows plus the tolerances recorded with them.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedReport {
    pub rows: Vec<BenchRow>,
    pub endpoint_radius: Option<f64>,
    pub tube_radius: Option<f64>,
}

/// Reads back [`write_report_csv`] output together with its histogram sidecar.
pub fn read_report_csv<R: Read, H: Read>(table: R, histograms: H) -> Result<ParsedReport> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(table);
    let header = reader.headers().map_err(csv_err)?.clone();
    if header.iter().ne(REPORT_COLUMNS.iter().copied()) {
        return Err(Error::Parse(format!("unexpected report header {header:?}")));
    }
    let mut rows = Vec::new();
    let mut bins = Vec::new();
    let (mut endpoint_radius, mut tube_radius) = (None, None);
    for rec in reader.deserialize::<CsvRow>() {
        let r = rec.map_err(csv_err)?;
        endpoint_radius = Some(r.endpoint_radius);
        tube_radius = Some(r.tube_radius);
        bins.push(r.histogram_bins);
        rows.push(BenchRow {
            config_id: r.config_id,
            head: r.head,
            n_steps: r.n_steps,
            warm_start: r.warm_start,
            mode: r.mode,
            c: r.c,
            episodes: r.episodes,
            failures: r.failures,
            success_rate: r.success_rate,
            mean_chunk_error: r.mean_chunk_error,
            mean_gflops: r.mean_gflops,
            mean_backbone_gflops: r.mean_backbone_gflops,
            mean_exit_layer: r.mean_exit_layer,
            total_denoising_steps: r.total_denoising_steps,
            reduction_pct: r.reduction_pct,
            backbone_reduction_pct: r.backbone_reduction_pct,
            error: r.error,
            histogram: Vec::new(),
        });
    }
    let mut hist = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(histograms);
    let header = hist.headers().map_err(csv_err)?.clone();
    if header.iter().ne(HISTOGRAM_COLUMNS.iter().copied()) {
        return Err(Error::Parse(format!(
            "unexpected histogram header {header:?}"
        )));
    }
    for rec in hist.deserialize::<HistRow>() {
        let h = rec.map_err(csv_err)?;
        let row = rows
            .iter_mut()
            .find(|r| r.config_id == h.config_id)
            .ok_or_else(|| {
                Error::Parse(format!("histogram for unknown config {:?}", h.config_id))
            })?;
        row.histogram.push((h.exit_layer, h.count));
    }
    for (row, expected) in rows.iter().zip(bins) {
        if row.histogram.len() != expected {
            return Err(Error::Parse(format!(
                "config {:?}: {} histogram bins, header says {expected}",
                row.config_id,
                row.histogram.len()
            )));
        }
    }
    Ok(ParsedReport {
        rows,
        endpoint_radius,
        tube_radius,
    })
}

/// The report as a JSON document; float fields roundtrip exactly.
pub fn write_report_json<W: Write>(report: &BenchReport, out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, report).map_err(|e| Error::Parse(format!("json: {e}")))
}

pub fn read_report_json<R: Read>(input: R) -> Result<BenchReport> {
    serde_json::from_reader(input).map_err(|e| Error::Parse(format!("json: {e}")))
}

/// Compact summary: one line per configuration with success, cost and reduction.
pub const SUMMARY_COLUMNS: [&str; 9] = [
    "config_id",
    "head",
    "c",
    "success_rate_pct",
    "mean_gflops",
    "reduction_pct",
    "backbone_reduction_pct",
    "mean_exit_layer",
    "mean_denoising_steps",
];

pub fn write_summary_csv<W: Write>(report: &BenchReport, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(out);
    w.write_record(SUMMARY_COLUMNS).map_err(csv_err)?;
    for r in &report.rows {
        let ok = (r.episodes - r.failures).max(1) as f64;
        w.write_record([
            r.config_id.clone(),
            r.head.name().to_string(),
            r.c.map(|c| c.to_string()).unwrap_or_default(),
            format!("{:.2}", 100.0 * r.success_rate),
            format!("{:.2}", r.mean_gflops),
            format!("{:.2}", r.reduction_pct),
            format!("{:.2}", r.backbone_reduction_pct),
            format!("{:.3}", r.mean_exit_layer),
            format!("{:.3}", r.total_denoising_steps as f64 / ok),
        ])
        .map_err(csv_err)?;
    }
    w.flush()
        .map_err(|e| Error::Parse(format!("csv flush: {e}")))
}
