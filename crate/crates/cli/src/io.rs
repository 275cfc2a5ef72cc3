//! File outputs: deterministic metrics CSVs, wall-clock timing CSVs kept
//! separate (so reruns with equal seeds produce byte-identical metrics),
//! and the JSON results bundle.

use crate::config::RunConfig;
use bilevel_core::model::MetricsRecord;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

pub const RESULTS_FORMAT: &str = "bilevel-results";
pub const RESULTS_VERSION: u32 = 1;

/// Everything a run leaves behind, echoing the configuration that
/// reproduces it bit-exactly under the same binary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultsBundle {
    pub format: String,
    pub version: u32,
    pub command: String,
    pub package_version: String,
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_epoch: Vec<MetricsRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_test: Option<MetricsRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSummary>,
}

impl ResultsBundle {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            format: RESULTS_FORMAT.to_string(),
            version: RESULTS_VERSION,
            command: command.to_string(),
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            per_epoch: Vec::new(),
            final_test: None,
            baseline: None,
            oracle: None,
        }
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let bundle: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        anyhow::ensure!(bundle.format == RESULTS_FORMAT, "not a results bundle");
        Ok(bundle)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub method: String,
    pub instances: usize,
    pub mean_obj: f64,
    pub std_obj: f64,
    pub mean_viol: f64,
    pub std_viol: f64,
    pub mean_penalized: f64,
    pub sec_per_instance: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleSummary {
    pub instances: usize,
    pub solved: usize,
    pub mean_objective: f64,
    pub worst_lower_kkt: f64,
    pub worst_feasibility_margin: f64,
    pub sec_per_instance: f64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Deterministic per-epoch metrics (no wall-clock columns).
pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> anyhow::Result<()> {
    let mut out = String::from(
        "epoch,mean_gap,std_gap,mean_viol,std_viol,mean_obj,n_eval,n_failed,feas_violations\n",
    );
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            fmt_opt(r.mean_gap),
            fmt_opt(r.std_gap),
            r.mean_viol,
            r.std_viol,
            r.mean_obj,
            r.n_eval,
            r.n_failed,
            r.n_feasibility_violations
        )?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Wall-clock companion to the metrics CSV.
pub fn write_timings_csv(path: &Path, records: &[MetricsRecord]) -> anyhow::Result<()> {
    let mut out = String::from("epoch,sec_per_instance\n");
    for r in records {
        writeln!(out, "{},{}", r.epoch, r.sec_per_instance)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub struct OracleRow {
    pub index: usize,
    pub objective: f64,
    pub lower_kkt: f64,
    pub feasibility_margin: f64,
    pub pieces_skipped: usize,
}

pub fn write_oracle_csv(path: &Path, rows: &[OracleRow]) -> anyhow::Result<()> {
    let mut out = String::from("index,objective,lower_kkt,feasibility_margin,pieces_skipped\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.index, r.objective, r.lower_kkt, r.feasibility_margin, r.pieces_skipped
        )?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub struct PsoRow {
    pub index: usize,
    pub objective: f64,
    pub violation: f64,
    pub penalized: f64,
    pub failures: usize,
    pub evaluations: usize,
}

pub fn write_pso_csv(path: &Path, rows: &[PsoRow]) -> anyhow::Result<()> {
    let mut out = String::from("index,objective,violation,penalized,failures,evaluations\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.index, r.objective, r.violation, r.penalized, r.failures, r.evaluations
        )?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Per-iteration best-objective traces, one row per (instance, iteration).
pub fn write_pso_trace_csv(path: &Path, traces: &[(usize, Vec<f64>)]) -> anyhow::Result<()> {
    let mut out = String::from("instance,iteration,best_penalized\n");
    for (idx, trace) in traces {
        for (it, v) in trace.iter().enumerate() {
            writeln!(out, "{},{},{}", idx, it, v)?;
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Tidy long-format series for external plotting.
pub struct PlotRow {
    pub run: String,
    pub series: String,
    pub index: usize,
    pub mean: f64,
    pub std: Option<f64>,
}

pub fn write_plotdata_csv(path: &Path, rows: &[PlotRow]) -> anyhow::Result<()> {
    let mut out = String::from("run,series,index,mean,std\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.run, r.series, r.index, r.mean, fmt_opt(r.std))?;
    }
    std::fs::write(path, out)?;
    Ok(())
}
