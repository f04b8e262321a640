use std::path::Path;
use std::time::Instant;

use hmrn_core::metrics::{precision_recall, render_report, report_value, ConfusionMatrix, Metrics, ReportFormat};
use hmrn_core::model::HmresnetModel;
use hmrn_core::optim::evaluate;
use hmrn_core::datapipe::{split, WindowedDataset};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::data;
use crate::fail::{validation, CliResult, Ctx, Failure};
use crate::train;

fn confusion(model: &HmresnetModel, ds: &WindowedDataset, batch: usize) -> CliResult<(ConfusionMatrix, Metrics)> {
    let (_, _, preds) = evaluate(model, ds, batch).ctx("evaluating")?;
    let cm = ConfusionMatrix::from_predictions(ds.class_names().to_vec(), ds.labels(), &preds)?;
    let m = precision_recall(&cm)?;
    Ok((cm, m))
}

pub fn run(cfg: &ExperimentConfig, model: Option<&Path>, data_file: Option<&Path>, format: ReportFormat) -> CliResult {
    let model_path = model.unwrap_or(&cfg.output.model);
    if !model_path.is_file() {
        return Err(Failure::input(anyhow::anyhow!("model file {} not found", model_path.display())));
    }
    let ds = match data_file {
        Some(p) => WindowedDataset::load(p).ctx(format!("reading {}", p.display()))?,
        None => data::load(&cfg.output.data_dir, data::TEST)?,
    };
    let model = HmresnetModel::load(model_path).ctx(format!("reading {}", model_path.display()))?;
    let k = model.config().class_count;
    if k != ds.class_names().len() {
        return Err(validation(anyhow::anyhow!(
            "class-count mismatch: model predicts {k} classes, dataset has {}",
            ds.class_names().len()
        )));
    }
    ds.check_compatible(model.config())
        .map_err(|e| validation(anyhow::anyhow!("dataset and model disagree: {e}")))?;
    let (cm, m) = confusion(&model, &ds, cfg.training.batch_size)?;
    print!("{}", render_report(&cm, &m, format));
    Ok(())
}

pub fn run_folds(cfg: &ExperimentConfig, k: usize, format: ReportFormat, timing: bool) -> CliResult {
    cfg.validate()?;
    if k < 2 {
        return Err(validation(anyhow::anyhow!("--folds must be >= 2, got {k}")));
    }
    let all = data::load(&cfg.output.data_dir, data::ALL)?;
    let spec = cfg.fold_spec(k, cfg.training.seed);
    let mc = train::model_config(cfg, &all)?;
    let folds = split(&all, &spec).ctx("building folds")?;

    let mut pooled = ConfusionMatrix::new(all.class_names().to_vec());
    let mut per_fold = Vec::with_capacity(k);
    for (i, (mut tr, mut te)) in folds.into_iter().enumerate() {
        let start = Instant::now();
        let stats = tr.fit_normalization()?;
        tr.normalize(&stats)?;
        te.normalize(&stats)?;
        let mut model = train::init_model(mc.clone(), cfg.training.seed.wrapping_add(i as u64), &tr)?;
        let mut tc = cfg.training.clone();
        tc.seed = tc.seed.wrapping_add(i as u64);
        train::train(&mut model, &tr, None, &tc, &format!("fold {}/{k} ", i + 1))?;
        let (cm, m) = confusion(&model, &te, tc.batch_size)?;
        if timing {
            eprintln!("fold {}/{k} took {:.1}s", i + 1, start.elapsed().as_secs_f64());
        }
        pooled.merge(&cm)?;
        per_fold.push((cm, m));
    }
    let pooled_metrics = precision_recall(&pooled)?;
    let mean = |f: fn(&Metrics) -> f64| per_fold.iter().map(|(_, m)| f(m)).sum::<f64>() / k as f64;
    let (acc, mp, mr) = (mean(|m| m.accuracy), mean(|m| m.macro_precision), mean(|m| m.macro_recall));

    match format {
        ReportFormat::Json => {
            let doc = json!({
                "folds": per_fold.iter().map(|(cm, m)| report_value(cm, m)).collect::<Vec<_>>(),
                "mean": { "accuracy": acc, "macro": { "precision": mp, "recall": mr } },
                "pooled": report_value(&pooled, &pooled_metrics),
            });
            println!("{}", serde_json::to_string_pretty(&doc).map_err(anyhow::Error::from)?);
        }
        ReportFormat::Csv => {
            println!("fold,accuracy,macro_precision,macro_recall,samples");
            for (i, (_, m)) in per_fold.iter().enumerate() {
                println!("{},{},{},{},{}", i + 1, m.accuracy, m.macro_precision, m.macro_recall, m.sample_count);
            }
            println!("mean,{acc},{mp},{mr},{}", pooled_metrics.sample_count);
        }
        ReportFormat::Text => {
            println!("{:>5} {:>9} {:>9} {:>9} {:>8}", "fold", "accuracy", "macro_p", "macro_r", "samples");
            for (i, (_, m)) in per_fold.iter().enumerate() {
                println!(
                    "{:>5} {:>9.4} {:>9.4} {:>9.4} {:>8}",
                    i + 1,
                    m.accuracy,
                    m.macro_precision,
                    m.macro_recall,
                    m.sample_count
                );
            }
            println!("{:>5} {acc:>9.4} {mp:>9.4} {mr:>9.4} {:>8}", "mean", pooled_metrics.sample_count);
            println!("\npooled over folds:");
            print!("{}", render_report(&pooled, &pooled_metrics, ReportFormat::Text));
        }
    }
    Ok(())
}
