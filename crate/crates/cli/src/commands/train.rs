//! `train`: the Algorithm-1 loop with per-epoch validation metrics and a
//! best-validation checkpoint.

use crate::config::RunConfig;
use crate::io::{write_metrics_csv, write_timings_csv, ResultsBundle};
use bilevel_core::coupling::CorrectionSettings;
use bilevel_core::model::{
    evaluate, save_checkpoint, train, Checkpoint, MlpSpec, Model, Normalizer, RngState,
    TrainConfig, TrainError,
};
use bilevel_core::numerics::RngStream;
use bilevel_core::zoo::Family;

pub fn train_config_of(config: &RunConfig) -> TrainConfig {
    TrainConfig {
        learning_rate: config.train.learning_rate,
        penalty_weight: config.train.penalty_weight,
        correction: CorrectionSettings::new(
            config.train.gamma,
            config.train.m_train,
            config.train.m_test,
        ),
        epochs: config.train.epochs,
        batch_size: config.train.batch_size,
        seed: config.train.seed,
        adam: Default::default(),
    }
}

pub fn init_model(config: &RunConfig, family: &Family, train_params: &[bilevel_core::numerics::DenseVector], upper_set: &bilevel_core::problem::UpperSet) -> Model {
    let spec = MlpSpec::k_layer(
        config.model.layers,
        family.param_dim(),
        family.y_dim(),
        config.model.hidden_width,
    );
    let normalizer = Normalizer::fit(train_params);
    let mut rng = RngStream::substream(config.model.seed, 7);
    Model::init_inside(spec, normalizer, upper_set, &mut rng)
}

pub fn cmd_train(config: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(&config.out_dir)?;
    let ds = super::load_dataset(config)?;
    let train_set = ds.family.instance_set(&ds.train);
    let val_set = ds.family.instance_set(&ds.val);
    let val_oracle = super::oracle_values(&ds.family, &ds.val);

    let model = init_model(config, &ds.family, &train_set.params, train_set.problems[0].upper_set());
    let tc = train_config_of(config);
    let out = match train(model, &train_set, &val_set, val_oracle.as_deref(), &tc) {
        Ok(out) => out,
        Err(e @ TrainError::EpochFailureThreshold { .. }) => {
            return Err(anyhow::Error::new(super::SolverFailure(e.to_string())))
        }
        Err(e) => return Err(e.into()),
    };

    let rng_state = RngState {
        algorithm: RngStream::ALGORITHM.to_string(),
        seed: config.model.seed,
        stream: 7,
        word_pos: 0,
    };
    save_checkpoint(
        &config.checkpoint_path(),
        &Checkpoint::new(out.best_model.clone(), tc.clone(), rng_state.clone()),
    )?;
    save_checkpoint(
        &config.out_dir.join("checkpoint_final.json"),
        &Checkpoint::new(out.model.clone(), tc.clone(), rng_state),
    )?;

    write_metrics_csv(&config.out_dir.join("metrics.csv"), &out.records)?;
    write_timings_csv(&config.out_dir.join("timings.csv"), &out.records)?;

    // Final test evaluation with the best-validation weights.
    let test_set = ds.family.instance_set(&ds.test);
    let test_oracle = super::oracle_values(&ds.family, &ds.test);
    let final_test = evaluate(
        &out.best_model,
        &test_set,
        tc.correction.gamma,
        tc.correction.m_test,
        test_oracle.as_deref(),
        out.best_epoch,
    );

    let mut bundle = ResultsBundle::new("train", config);
    bundle.per_epoch = out.records.clone();
    bundle.final_test = Some(final_test.clone());
    bundle.save(&config.out_dir.join("train_summary.json"))?;
    std::fs::write(config.out_dir.join("config.toml"), config.to_toml())?;

    eprintln!(
        "trained {} epochs (best validation at {}); test: gap {:?} viol {:.3e} obj {:.4}",
        tc.epochs, out.best_epoch, final_test.mean_gap, final_test.mean_viol, final_test.mean_obj
    );
    Ok(())
}
