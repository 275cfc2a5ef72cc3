//! `pso`: the penalized particle-swarm baseline over test instances, with
//! per-iteration best-objective traces.

use crate::config::RunConfig;
use crate::io::{write_pso_csv, write_pso_trace_csv, BaselineSummary, PsoRow, ResultsBundle};
use bilevel_core::baselines::{pso_solve, PsoSettings};
use std::time::Instant;

pub fn cmd_pso(config: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(&config.out_dir)?;
    let ds = super::load_dataset(config)?;
    let bounds = super::pso_bounds(&ds.family, config)?;
    let count = if config.pso.instances > 0 {
        config.pso.instances.min(ds.test.len())
    } else {
        ds.test.len()
    };
    let split = ds.test.truncated(count);
    let set = ds.family.instance_set(&split);

    let mut rows = Vec::with_capacity(count);
    let mut traces = Vec::with_capacity(count);
    let start = Instant::now();
    for (i, problem) in set.problems.iter().enumerate() {
        let settings = PsoSettings {
            c1: 0.5,
            c2: 0.5,
            inertia: 0.9,
            particles: config.pso.particles,
            iterations: config.pso.iterations,
            kappa: config.pso.kappa,
            bounds: bounds.clone(),
            seed: config.pso.seed.wrapping_add(i as u64),
        };
        let result = pso_solve(problem, &settings);
        rows.push(PsoRow {
            index: i,
            objective: result.objective,
            violation: result.violation,
            penalized: result.penalized,
            failures: result.failures,
            evaluations: result.evaluations,
        });
        traces.push((i, result.trace));
    }
    let elapsed = start.elapsed().as_secs_f64();

    write_pso_csv(&config.out_dir.join("pso.csv"), &rows)?;
    write_pso_trace_csv(&config.out_dir.join("pso_trace.csv"), &traces)?;

    let n = rows.len().max(1) as f64;
    let mean_obj = rows.iter().map(|r| r.objective).sum::<f64>() / n;
    let mean_viol = rows.iter().map(|r| r.violation).sum::<f64>() / n;
    let summary = BaselineSummary {
        method: "pso".into(),
        instances: rows.len(),
        mean_obj,
        std_obj: (rows.iter().map(|r| (r.objective - mean_obj).powi(2)).sum::<f64>() / n).sqrt(),
        mean_viol,
        std_viol: (rows.iter().map(|r| (r.violation - mean_viol).powi(2)).sum::<f64>() / n).sqrt(),
        mean_penalized: rows.iter().map(|r| r.penalized).sum::<f64>() / n,
        sec_per_instance: elapsed / n,
        failures: rows.iter().map(|r| r.failures).sum(),
    };
    let mut bundle = ResultsBundle::new("pso", config);
    bundle.baseline = Some(summary.clone());
    bundle.save(&config.out_dir.join("pso_summary.json"))?;
    eprintln!(
        "pso[{} instances]: mean obj {:.4} mean viol {:.3e} ({:.1}s/instance)",
        summary.instances, summary.mean_obj, summary.mean_viol, summary.sec_per_instance
    );
    Ok(())
}
