use std::collections::BTreeMap;

use hmrn_core::datapipe::{
    load_multi_imu_csv, load_ucihar_split, split_indices, DatasetManifest, SplitMode, SplitSummary, WindowedDataset,
    DATASET_FORMAT_VERSION, UCIHAR_SENSOR,
};
use serde_json::json;

use crate::config::{DatasetKind, ExperimentConfig};
use crate::data;
use crate::fail::{validation, CliResult, Ctx, Failure};

/// Accelerometer and gyroscope axes, as used by the model by default.
pub const UCIHAR_DEFAULT_CHANNELS: [&str; 6] = [
    "total_acc_x",
    "total_acc_y",
    "total_acc_z",
    "body_gyro_x",
    "body_gyro_y",
    "body_gyro_z",
];

struct Prepared {
    all: WindowedDataset,
    train: WindowedDataset,
    test: WindowedDataset,
    overlap: f64,
    sample_rate: f64,
    filters: serde_json::Value,
    source: String,
}

fn select(ds: WindowedDataset, channels: &Option<Vec<String>>) -> CliResult<WindowedDataset> {
    match channels {
        Some(c) => ds.select_channels(c).map_err(|e| validation(anyhow::anyhow!("dataset.channels: {e}"))),
        None => Ok(ds),
    }
}

fn prepare(cfg: &ExperimentConfig) -> CliResult<Prepared> {
    let d = &cfg.dataset;
    match d.kind {
        DatasetKind::Ucihar => {
            let root = d.root.as_ref().expect("validated");
            let channels = d.channels.clone().unwrap_or_else(|| {
                UCIHAR_DEFAULT_CHANNELS
                    .iter()
                    .map(|c| format!("{UCIHAR_SENSOR}/{c}"))
                    .collect()
            });
            let train = load_ucihar_split(root, "train").ctx("loading the train split")?;
            let test = load_ucihar_split(root, "test").ctx("loading the test split")?;
            let train = select(train, &Some(channels.clone()))?;
            let test = select(test, &Some(channels))?;
            Ok(Prepared {
                all: train.concat(&test)?,
                train,
                test,
                overlap: 0.5,
                sample_rate: 50.0,
                filters: json!({ "applied": [], "input": "pre-windowed" }),
                source: root.display().to_string(),
            })
        }
        DatasetKind::Csv => {
            let schema = cfg.load_schema()?;
            let csv = d.csv.as_ref().expect("validated");
            let all = select(load_multi_imu_csv(csv, &schema)?, &d.channels)?;
            let mut spec = d.split.clone();
            if spec.mode == SplitMode::KFold {
                // the first fold serves as the fixed train/test pair
                spec.k = spec.k.max(2);
            }
            let folds = split_indices(all.subjects(), &spec).ctx("splitting the recording")?;
            let (tr, te) = &folds[0];
            let mut filters = serde_json::to_value(&schema.filters).map_err(anyhow::Error::from)?;
            filters["noise_filter_active"] = json!(schema.noise_filter_active());
            Ok(Prepared {
                train: all.subset(tr)?,
                test: all.subset(te)?,
                all,
                overlap: schema.overlap,
                sample_rate: schema.sample_rate,
                filters,
                source: csv.display().to_string(),
            })
        }
    }
}

pub fn run(cfg: &ExperimentConfig) -> CliResult {
    cfg.validate()?;
    let Prepared {
        all,
        mut train,
        mut test,
        overlap,
        sample_rate,
        filters,
        source,
    } = prepare(cfg)?;
    if train.is_empty() || test.is_empty() {
        return Err(Failure::input(anyhow::anyhow!(
            "split produced {} train and {} test windows",
            train.len(),
            test.len()
        )));
    }
    let stats = train.fit_normalization()?;
    train.normalize(&stats)?;
    test.normalize(&stats)?;

    let dir = &cfg.output.data_dir;
    let mut splits = BTreeMap::new();
    for (name, file, ds) in [("all", data::ALL, &all), ("train", data::TRAIN, &train), ("test", data::TEST, &test)] {
        splits.insert(name.to_string(), SplitSummary::of(file, ds));
    }
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        source,
        sensors: train.sensors().to_vec(),
        window_length: train.window_length(),
        overlap,
        sample_rate,
        class_names: train.class_names().to_vec(),
        splits,
        filters,
        normalization: Some(stats),
    };

    std::fs::create_dir_all(dir).map_err(|e| Failure::input(anyhow::anyhow!("creating {}: {e}", dir.display())))?;
    all.save(&data::path(dir, data::ALL))?;
    train.save(&data::path(dir, data::TRAIN))?;
    test.save(&data::path(dir, data::TEST))?;
    manifest.save(&data::path(dir, data::MANIFEST))?;
    println!(
        "{} train / {} test windows ({} channels x {}) -> {}",
        train.len(),
        test.len(),
        train.channel_count(),
        train.window_length(),
        dir.display()
    );
    Ok(())
}
