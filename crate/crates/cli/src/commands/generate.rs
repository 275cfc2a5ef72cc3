//! `generate`: build the family and the train/val/test datasets.

use crate::config::RunConfig;
use crate::io::ResultsBundle;
use bilevel_core::zoo::Dataset;

pub fn cmd_generate(config: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(&config.out_dir)?;
    let family = super::build_family(&config.family);
    let ds = Dataset::generate(
        family,
        config.dataset.train,
        config.dataset.val,
        config.dataset.test,
        config.dataset.seed,
    );
    std::fs::write(config.dataset_path(), serde_json::to_string(&ds)?)?;
    std::fs::write(config.out_dir.join("config.toml"), config.to_toml())?;
    ResultsBundle::new("generate", config).save(&config.out_dir.join("generate_summary.json"))?;
    eprintln!(
        "generated {} dataset: {}/{}/{} instances -> {}",
        ds.family.name(),
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        config.dataset_path().display()
    );
    Ok(())
}
