//! `oracle`: certified objectives for small bilevel-QP instances via
//! active-set enumeration.

use crate::config::RunConfig;
use crate::io::{write_oracle_csv, OracleRow, OracleSummary, ResultsBundle};
use bilevel_core::baselines::solve_bqp_exact;
use bilevel_core::zoo::{Family, Instances};
use rayon::prelude::*;
use std::time::Instant;

pub fn cmd_oracle(config: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(&config.out_dir)?;
    let ds = super::load_dataset(config)?;
    let Family::Bqp(family) = &ds.family else {
        anyhow::bail!("the enumeration oracle only covers the bqp family");
    };
    let split_name = config.oracle.split.as_deref().unwrap_or("test");
    let split = super::split_of(&ds, split_name)?;
    let split =
        if config.oracle.instances > 0 { split.truncated(config.oracle.instances) } else { split.clone() };
    let Instances::Bqp(list) = &split else { unreachable!() };

    let start = Instant::now();
    let results: Vec<Option<OracleRow>> = list
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            solve_bqp_exact(family, inst).ok().map(|r| OracleRow {
                index: i,
                objective: r.objective,
                lower_kkt: r.certificate.lower_kkt_residual,
                feasibility_margin: r.certificate.upper_feasibility_margin,
                pieces_skipped: r.certificate.pieces_skipped,
            })
        })
        .collect();
    let elapsed = start.elapsed().as_secs_f64();
    let rows: Vec<OracleRow> = results.into_iter().flatten().collect();
    if rows.len() * 2 < list.len() {
        return Err(anyhow::Error::new(super::SolverFailure(format!(
            "oracle solved only {}/{} instances",
            rows.len(),
            list.len()
        ))));
    }
    write_oracle_csv(&config.out_dir.join("oracle.csv"), &rows)?;
    let summary = OracleSummary {
        instances: list.len(),
        solved: rows.len(),
        mean_objective: rows.iter().map(|r| r.objective).sum::<f64>() / rows.len().max(1) as f64,
        worst_lower_kkt: rows.iter().fold(0.0, |m, r| m.max(r.lower_kkt)),
        worst_feasibility_margin: rows
            .iter()
            .fold(f64::INFINITY, |m, r| m.min(r.feasibility_margin)),
        sec_per_instance: elapsed / list.len().max(1) as f64,
    };
    let mut bundle = ResultsBundle::new("oracle", config);
    bundle.oracle = Some(summary.clone());
    bundle.save(&config.out_dir.join("oracle_summary.json"))?;
    eprintln!(
        "oracle[{split_name}]: {}/{} solved, mean L* {:.4}",
        summary.solved, summary.instances, summary.mean_objective
    );
    Ok(())
}
