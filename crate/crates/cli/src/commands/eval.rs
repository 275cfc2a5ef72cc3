//! `eval`: metrics of a stored checkpoint on a dataset split.

use crate::config::RunConfig;
use crate::io::{write_metrics_csv, write_timings_csv, ResultsBundle};
use bilevel_core::model::{evaluate, load_checkpoint};
use bilevel_core::zoo::Instances;

pub fn cmd_eval(config: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(&config.out_dir)?;
    let ds = super::load_dataset(config)?;
    let ckpt = load_checkpoint(&config.checkpoint_path())?;
    let split = super::split_of(&ds, &config.eval.split)?;
    let split: Instances = if config.eval.instances > 0 {
        split.truncated(config.eval.instances)
    } else {
        split.clone()
    };
    let set = ds.family.instance_set(&split);
    let oracle = super::oracle_values(&ds.family, &split);
    let rec = evaluate(
        &ckpt.model,
        &set,
        ckpt.train_config.correction.gamma,
        ckpt.train_config.correction.m_test,
        oracle.as_deref(),
        0,
    );
    if rec.n_failed * 2 > set.len() {
        return Err(anyhow::Error::new(super::SolverFailure(format!(
            "{}/{} instances failed the lower level",
            rec.n_failed,
            set.len()
        ))));
    }
    write_metrics_csv(&config.out_dir.join("eval_metrics.csv"), std::slice::from_ref(&rec))?;
    write_timings_csv(&config.out_dir.join("eval_timings.csv"), std::slice::from_ref(&rec))?;
    let mut bundle = ResultsBundle::new("eval", config);
    bundle.final_test = Some(rec.clone());
    bundle.save(&config.out_dir.join("eval_summary.json"))?;
    eprintln!(
        "eval[{}]: gap {:?} viol {:.3e} obj {:.4} ({} ok, {} failed)",
        config.eval.split, rec.mean_gap, rec.mean_viol, rec.mean_obj, rec.n_eval, rec.n_failed
    );
    Ok(())
}
