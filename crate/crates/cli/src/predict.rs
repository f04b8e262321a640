use std::path::Path;
use std::time::Instant;

use hmrn_core::datapipe::WindowedDataset;
use hmrn_core::metrics::ReportFormat;
use hmrn_core::model::{HmresnetModel, ModelInput, Prediction};
use hmrn_core::tensor::Tensor;
use serde_json::json;

use crate::fail::{validation, CliResult, Ctx, Failure};

const BATCH: usize = 64;

/// Windows as `[C × L]` tensors, z-scored with the model's statistics
/// unless the file says it already is.
fn read_windows(model: &HmresnetModel, input: &Path) -> CliResult<Vec<Tensor>> {
    let cfg = model.config();
    let (c, l) = (cfg.total_channels(), cfg.window_length);
    let stats = model.metadata().normalization.as_ref();
    if input.extension().is_some_and(|e| e == "hmrd") {
        let mut ds = WindowedDataset::load(input).ctx(format!("reading {}", input.display()))?;
        ds.check_compatible(cfg)
            .map_err(|e| validation(anyhow::anyhow!("{}: shape mismatch: {e}", input.display())))?;
        if let (None, Some(s)) = (ds.normalization(), stats) {
            ds.normalize(s)?;
        }
        return Ok((0..ds.len()).map(|i| ds.window(i).clone()).collect());
    }
    let text = std::fs::read_to_string(input).map_err(|e| Failure::input(anyhow::anyhow!("{}: {e}", input.display())))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values = line
            .split(|ch: char| ch == ',' || ch.is_whitespace())
            .filter(|t| !t.is_empty())
            .enumerate()
            .map(|(col, t)| {
                t.parse::<f64>().map_err(|_| {
                    Failure::input(anyhow::anyhow!("{}:{}: value {} ({t:?}) is not a number", input.display(), ln + 1, col + 1))
                })
            })
            .collect::<CliResult<Vec<f64>>>()?;
        if values.len() != c * l {
            return Err(validation(anyhow::anyhow!(
                "{}:{}: shape mismatch: {} values, model expects {c} channels x {l} samples = {}",
                input.display(),
                ln + 1,
                values.len(),
                c * l
            )));
        }
        let mut w = Tensor::new(vec![c, l], values)?;
        if let Some(s) = stats {
            for r in 0..c {
                let (m, sd) = (s.mean[r], s.std[r]);
                w.outer_mut(r).iter_mut().for_each(|x| *x = (*x - m) / sd);
            }
        }
        out.push(w);
    }
    if out.is_empty() {
        return Err(Failure::input(anyhow::anyhow!("{} contains no windows", input.display())));
    }
    Ok(out)
}

fn batch_input(windows: &[Tensor]) -> CliResult<ModelInput> {
    let (c, l) = (windows[0].dim(0), windows[0].dim(1));
    let b = windows.len();
    let per_channel = (0..c)
        .map(|r| {
            let mut data = Vec::with_capacity(b * l);
            for w in windows {
                data.extend_from_slice(w.outer(r));
            }
            Tensor::new(vec![b, 1, l], data)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ModelInput::new(per_channel)?)
}

pub fn run(model_path: &Path, input: &Path, format: ReportFormat, timing: bool) -> CliResult {
    let model = HmresnetModel::load(model_path).ctx(format!("reading {}", model_path.display()))?;
    let windows = read_windows(&model, input)?;

    let mut preds: Vec<Prediction> = Vec::with_capacity(windows.len());
    let mut elapsed = 0.0;
    if timing {
        // one window at a time: the latency of recognising a single activity
        for w in &windows {
            let start = Instant::now();
            preds.extend(model.predict(&batch_input(std::slice::from_ref(w))?)?);
            elapsed += start.elapsed().as_secs_f64();
        }
    } else {
        for chunk in windows.chunks(BATCH) {
            preds.extend(model.predict(&batch_input(chunk)?)?);
        }
    }

    let k = model.config().class_count;
    if format == ReportFormat::Csv {
        let names: Vec<String> = (0..k).map(|c| format!("p_{}", model.class_name(c))).collect();
        println!("window,class,{}", names.join(","));
    }
    for (i, p) in preds.iter().enumerate() {
        let name = model.class_name(p.class);
        match format {
            ReportFormat::Text => {
                let probs: Vec<String> = p.probabilities.iter().map(|v| format!("{v:.9}")).collect();
                println!("{name}\t{}", probs.join(" "));
            }
            ReportFormat::Json => println!(
                "{}",
                json!({ "window": i, "class": name, "index": p.class, "probabilities": p.probabilities })
            ),
            ReportFormat::Csv => {
                let probs: Vec<String> = p.probabilities.iter().map(|v| v.to_string()).collect();
                println!("{i},{name},{}", probs.join(","));
            }
        }
    }
    if timing {
        let mean = elapsed / preds.len() as f64;
        eprintln!("mean latency per window: {:.6} s over {} windows", mean, preds.len());
    }
    Ok(())
}
