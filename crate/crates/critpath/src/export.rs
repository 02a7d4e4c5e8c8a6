//! CSV, JSON and text outputs. Floats use Rust's shortest round-trip
//! formatting, which does not depend on the locale.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use critpath_core::analysis::{FilterClassMap, LayerStd};
use critpath_core::evaluator::EvalReport;
use critpath_core::trainer::TrainHistory;
use critpath_core::{LayerKind, ParamStats};
use serde::Serialize;

use crate::error::{io_err, Result};

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Header `filter,0,1,..`; one row per filter.
pub fn map_csv(map: &FilterClassMap) -> String {
    let mut out = String::from("filter");
    for c in 0..map.classes {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    for f in 0..map.filters {
        let _ = write!(out, "{f}");
        for v in map.row(f) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct MapSidecar<'a> {
    conv: usize,
    kind: &'a str,
    filters: usize,
    classes: usize,
    per_class_cap: usize,
    seed: u64,
    samples_per_class: &'a [usize],
    model_digest: &'a str,
}

/// `conv{l}_{kind}.csv` plus a `.json` sidecar in `dir`; returns the CSV path.
pub fn write_map(dir: &Path, map: &FilterClassMap, model_digest: &str) -> Result<PathBuf> {
    let stem = format!("conv{}_{}", map.conv, map.kind.as_str());
    let csv = dir.join(format!("{stem}.csv"));
    write_text(&csv, &map_csv(map))?;
    write_json(
        &dir.join(format!("{stem}.json")),
        &MapSidecar {
            conv: map.conv,
            kind: map.kind.as_str(),
            filters: map.filters,
            classes: map.classes,
            per_class_cap: map.per_class_cap,
            seed: map.seed,
            samples_per_class: &map.samples_per_class,
            model_digest,
        },
    )?;
    Ok(csv)
}

pub fn history_csv(history: &TrainHistory) -> String {
    let mut out = String::from("epoch,loss,test_accuracy\n");
    for e in &history.epochs {
        let _ = writeln!(out, "{},{},{}", e.epoch, e.loss, e.test_accuracy);
    }
    out
}

pub fn layer_std_csv(std: &LayerStd) -> String {
    let mut out = String::from("conv,normalized_std\n");
    for (i, v) in std.values.iter().enumerate() {
        let _ = writeln!(out, "{},{v}", i + 1);
    }
    out
}

/// Long format: `filter,step,objective`.
pub fn trace_csv(traces: &[(usize, Vec<f32>)]) -> String {
    let mut out = String::from("filter,step,objective\n");
    for (f, trace) in traces {
        for (s, v) in trace.iter().enumerate() {
            let _ = writeln!(out, "{f},{s},{v}");
        }
    }
    out
}

pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("class,tp,fp,bytes\n");
    for r in &report.rows {
        let _ = writeln!(out, "{},{},{},{}", r.class, r.tp, r.fp, r.bytes);
    }
    out
}

/// Aligned Class / TP / FP table with three decimals and the chance FP rate.
pub fn report_table(report: &EvalReport) -> String {
    let mut out = format!("{:>5}  {:>5}  {:>5}  {:>10}\n", "Class", "TP", "FP", "Bytes");
    for r in &report.rows {
        let _ = writeln!(out, "{:>5}  {:>5.3}  {:>5.3}  {:>10}", r.class, r.tp, r.fp, r.bytes);
    }
    let _ = writeln!(out, "{:>5}  {:>5.3}  {:>5.3}", "mean", report.mean_tp, report.mean_fp);
    let _ = writeln!(out, "chance FP (1/(n-1)): {:.3}", report.chance_fp);
    let _ = writeln!(
        out,
        "source: {} params, {} bytes; reserved ratio {}; layers {:?}",
        report.source_params, report.source_bytes, report.reserved_ratio, report.distill_layers
    );
    out
}

fn mb(bytes: usize) -> f64 {
    bytes as f64 / 1e6
}

/// Per-layer parameter table with conv-only (with and without biases) and total sizes.
pub fn paramcount_text(stats: &ParamStats) -> String {
    let mut out = format!("{:>5}  {:<24}  {:>12}\n", "layer", "kind", "params");
    for l in &stats.layers {
        let _ = writeln!(out, "{:>5}  {:<24}  {:>12}", l.layer, l.kind.to_string(), l.total());
    }
    let conv_weights: usize =
        stats.layers.iter().filter(|l| matches!(l.kind, LayerKind::Conv3x3 { .. })).map(|l| l.weights).sum();
    let _ = writeln!(out, "conv weights: {:>12}  ({:.3} MB)", conv_weights, mb(conv_weights * ParamStats::BYTES_PER_VALUE));
    let _ = writeln!(out, "conv params:  {:>12}  ({:.3} MB)", stats.conv_params, mb(stats.conv_bytes()));
    let _ = writeln!(out, "dense params: {:>12}  ({:.3} MB)", stats.dense_params, mb(stats.dense_bytes()));
    let _ = writeln!(out, "total params: {:>12}  ({:.3} MB)", stats.total_params, mb(stats.total_bytes()));
    out
}

pub fn paramcount_csv(stats: &ParamStats) -> String {
    let mut out = String::from("layer,weights,biases,total\n");
    for l in &stats.layers {
        let _ = writeln!(out, "{},{},{},{}", l.layer, l.weights, l.biases, l.total());
    }
    out
}

#[derive(Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub config: serde_json::Value,
    pub model_digest: Option<String>,
    pub created_unix: u64,
}

pub fn write_manifest(dir: &Path, command: &str, config: serde_json::Value, model_digest: Option<String>) -> Result<()> {
    let created_unix = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        config,
        model_digest,
        created_unix,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use critpath_core::analysis::MapKind;

    #[test]
    fn map_csv_layout() {
        let map = FilterClassMap {
            conv: 2,
            kind: MapKind::Contribution,
            filters: 2,
            classes: 3,
            values: vec![0.5, 1.0, 0.0, 2.0, 0.25, 1e-7],
            samples_per_class: vec![1, 1, 1],
            per_class_cap: 1,
            seed: 0,
        };
        let csv = map_csv(&map);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "filter,0,1,2");
        assert_eq!(lines[1], "0,0.5,1,0");
        let parsed: Vec<f64> = lines[2].split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        assert_eq!(parsed, vec![2.0, 0.25, 1e-7]);
    }
}
