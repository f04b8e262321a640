use hmrn_core::codec::write_atomic;
use hmrn_core::datapipe::WindowedDataset;
use hmrn_core::model::{HmresnetModel, ModelConfig, ModelMetadata};
use hmrn_core::optim::{fit, Control, Split, TrainConfig, TrainingLog};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DatasetKind, ExperimentConfig};
use crate::data;
use crate::fail::{validation, CliResult, Ctx};

/// Test accuracy reported for the smartphone dataset, shown for comparison.
pub const UCIHAR_REFERENCE_ACCURACY: f64 = 0.97619;

/// Model configuration for `ds`, checked against it before any training.
pub fn model_config(cfg: &ExperimentConfig, ds: &WindowedDataset) -> CliResult<ModelConfig> {
    let mc = cfg
        .model
        .model_config(ds.sensors().to_vec(), ds.window_length(), ds.class_names().len());
    mc.validate().map_err(|e| validation(anyhow::anyhow!("model: {e}")))?;
    ds.check_compatible(&mc)
        .map_err(|e| validation(anyhow::anyhow!("dataset and model disagree: {e}")))?;
    Ok(mc)
}

/// Builds a model whose initial weights depend only on `seed`; the
/// training loop draws from a different stream of the same seed.
pub fn init_model(mc: ModelConfig, seed: u64, ds: &WindowedDataset) -> CliResult<HmresnetModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut model = HmresnetModel::build(mc, &mut rng)?;
    model.set_metadata(ModelMetadata {
        class_names: ds.class_names().to_vec(),
        normalization: ds.normalization().cloned(),
    })?;
    Ok(model)
}

pub fn train(
    model: &mut HmresnetModel,
    train: &WindowedDataset,
    valid: Option<&WindowedDataset>,
    tc: &TrainConfig,
    label: &str,
) -> CliResult<TrainingLog> {
    let epochs = tc.epochs;
    let log = fit(model, train, valid, tc, |_, r| {
        let split = match r.split {
            Split::Train => "train",
            Split::Valid => "valid",
        };
        eprintln!(
            "{label}epoch {:>3}/{epochs} {split:<5} loss {:.4} acc {:.4} ({:.1}s)",
            r.epoch, r.loss, r.accuracy, r.wall_time_s
        );
        Control::Continue
    })
    .ctx("training")?;
    Ok(log)
}

pub fn run(cfg: &ExperimentConfig, timing: bool) -> CliResult {
    cfg.validate()?;
    let dir = &cfg.output.data_dir;
    data::manifest(dir)?;
    let train_set = data::load(dir, data::TRAIN)?;
    let test_set = data::load(dir, data::TEST)?;
    let mc = model_config(cfg, &train_set)?;
    test_set
        .check_compatible(&mc)
        .map_err(|e| validation(anyhow::anyhow!("test split and model disagree: {e}")))?;
    let mut model = init_model(mc, cfg.training.seed, &train_set)?;
    eprintln!(
        "training {} parameters on {} windows, validating on {}",
        model.parameter_count(),
        train_set.len(),
        test_set.len()
    );

    data::ensure_parent(&cfg.output.model)?;
    data::ensure_parent(&cfg.output.log)?;
    let log = train(&mut model, &train_set, Some(&test_set), &cfg.training, "")?;
    model.save(&cfg.output.model).ctx("writing the model")?;
    write_atomic(&cfg.output.log, log.to_jsonl(timing).as_bytes()).ctx("writing the training log")?;

    let acc = |s| log.last(s).map_or(f64::NAN, |r| r.accuracy);
    println!("final train accuracy {:.4}", acc(Split::Train));
    println!("final validation accuracy {:.4}", acc(Split::Valid));
    if cfg.dataset.kind == DatasetKind::Ucihar {
        println!("reference test accuracy {UCIHAR_REFERENCE_ACCURACY:.5}");
    }
    println!("model written to {}", cfg.output.model.display());
    Ok(())
}
