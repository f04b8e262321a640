mod common;

use std::path::Path;

use common::*;
use hmrn_core::datapipe::{DatasetManifest, WindowedDataset};
use hmrn_core::HmresnetModel;
use serde_json::Value;

fn config_arg(p: &Path) -> String {
    p.display().to_string()
}

fn smartphone_setup(epochs: usize) -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    write_smartphone_tree(&dir.path().join("raw"), 24, 12);
    let cfg = config_arg(&smartphone_config(dir.path(), epochs));
    (dir, cfg)
}

#[test]
fn preprocess_is_idempotent() {
    let (dir, cfg) = smartphone_setup(1);
    let o = run(&["preprocess", "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let files = ["all.hmrd", "train.hmrd", "test.hmrd", "manifest.json"];
    let first: Vec<Vec<u8>> = files.iter().map(|f| read(dir.path().join("prepared").join(f))).collect();
    let o = run(&["preprocess", "--config", &cfg]);
    assert_eq!(code(&o), 0);
    for (f, bytes) in files.iter().zip(&first) {
        assert_eq!(&read(dir.path().join("prepared").join(f)), bytes, "{f} changed on rerun");
    }
    let m = DatasetManifest::load(&dir.path().join("prepared/manifest.json")).unwrap();
    assert_eq!(m.splits["train"].windows, 24);
    assert_eq!(m.splits["test"].windows, 12);
    assert_eq!(m.window_length, 128);
    let train = WindowedDataset::load(&dir.path().join("prepared/train.hmrd")).unwrap();
    assert!(train.normalization().is_some());
    assert_eq!(train.channel_count(), 6);
}

#[test]
fn missing_label_file_is_an_input_error() {
    let (dir, cfg) = smartphone_setup(1);
    std::fs::remove_file(dir.path().join("raw/test/y_test.txt")).unwrap();
    let o = run(&["preprocess", "--config", &cfg]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("y_test.txt"), "{}", stderr(&o));
    assert!(!dir.path().join("prepared/manifest.json").exists());
}

#[test]
fn invalid_config_fails_before_side_effects() {
    let (dir, cfg) = smartphone_setup(1);
    let o = hmrn().args(["preprocess", "--config", &cfg]).env("HMRN_TRAINING__EPOCHS", "0").output().unwrap();
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("epochs"));
    assert!(!dir.path().join("prepared").exists());

    let o = hmrn().args(["train", "--config", &cfg]).env("HMRN_MODEL__KERNEL_SIZES", "[9, 4, 3]").output().unwrap();
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn train_without_preprocessing_names_the_fix() {
    let (_dir, cfg) = smartphone_setup(1);
    let o = run(&["train", "--config", &cfg]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("hmrn preprocess"), "{}", stderr(&o));
}

#[test]
fn env_override_changes_the_run() {
    let (dir, cfg) = smartphone_setup(1);
    assert_eq!(code(&run(&["preprocess", "--config", &cfg])), 0);
    let o = hmrn().args(["train", "--config", &cfg]).env("HMRN_TRAINING__EPOCHS", "2").output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = String::from_utf8(read(dir.path().join("out/train.jsonl"))).unwrap();
    let epochs: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|v| v["split"] == "train")
        .map(|v| v["epoch"].as_u64().unwrap())
        .collect();
    assert_eq!(epochs, vec![1, 2]);
    assert!(!log.contains("wall_time"));
}

#[test]
fn train_eval_predict_round_trip() {
    let (dir, cfg) = smartphone_setup(2);
    assert_eq!(code(&run(&["preprocess", "--config", &cfg])), 0);
    let o = run(&["train", "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("reference test accuracy 0.97619"));
    let model = HmresnetModel::load(&dir.path().join("out/model.hmrn")).unwrap();
    assert_eq!(model.metadata().class_names[5], "LAYING");

    // JSON report schema
    let o = run(&["eval", "--config", &cfg, "--format", "json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["schema_version"], 1);
    assert_eq!(r["classes"].as_array().unwrap().len(), 6);
    let matrix = r["matrix"].as_array().unwrap();
    assert_eq!(matrix.len(), 6);
    let total: u64 = matrix.iter().flat_map(|row| row.as_array().unwrap()).map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(total, 12);
    assert_eq!(r["sample_count"], 12);
    for key in ["accuracy"] {
        let v = r[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
    assert_eq!(r["per_class"]["precision"].as_array().unwrap().len(), 6);
    assert!(r["macro"]["recall"].is_number());

    let o = run(&["eval", "--config", &cfg, "--format", "csv"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).lines().count(), 7);
    let o = run(&["eval", "--config", &cfg]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("LAYING"));

    // predictions for every test window, rows on the simplex
    let test = dir.path().join("prepared/test.hmrd");
    let o = run(&["predict", "--config", &cfg, "--input", test.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 12);
    for l in &lines {
        let (name, probs) = l.split_once('\t').unwrap();
        assert!(model.metadata().class_names.iter().any(|c| c == name));
        let p: Vec<f64> = probs.split(' ').map(|v| v.parse().unwrap()).collect();
        assert_eq!(p.len(), 6);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let o = run(&["predict", "--config", &cfg, "--input", test.to_str().unwrap(), "--format", "json"]);
    for l in stdout(&o).lines() {
        let v: Value = serde_json::from_str(l).unwrap();
        let s: f64 = v["probabilities"].as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    // raw text windows get the model's normalization
    let ds = WindowedDataset::load(&dir.path().join("prepared/all.hmrd")).unwrap();
    let text: String = (0..3)
        .map(|i| ds.window(i).data().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",") + "\n")
        .collect();
    let raw = dir.path().join("raw.txt");
    std::fs::write(&raw, text).unwrap();
    let o = run(&["predict", "--config", &cfg, "--input", raw.to_str().unwrap(), "--format", "csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 4);

    std::fs::write(&raw, "1,2,3\n").unwrap();
    let o = run(&["predict", "--config", &cfg, "--input", raw.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("shape mismatch"));
}

#[test]
fn eval_rejects_a_model_for_other_classes() {
    let (dir, cfg) = smartphone_setup(1);
    assert_eq!(code(&run(&["preprocess", "--config", &cfg])), 0);
    assert_eq!(code(&run(&["train", "--config", &cfg])), 0);

    let other = tempfile::tempdir().unwrap();
    let icfg = config_arg(&imu_config(other.path(), 1));
    assert_eq!(code(&run(&["preprocess", "--config", &icfg])), 0);
    let model = dir.path().join("out/model.hmrn");
    let o = run(&["eval", "--config", &icfg, "--model", model.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn multi_imu_pipeline_and_folds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_arg(&imu_config(dir.path(), 1));
    let o = run(&["preprocess", "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = DatasetManifest::load(&dir.path().join("prepared/manifest.json")).unwrap();
    assert_eq!(m.class_names.len(), IMU_CLASSES);
    assert_eq!(m.window_length, 25);
    let all = WindowedDataset::load(&dir.path().join("prepared/all.hmrd")).unwrap();
    assert!(all.labels().iter().all(|&l| l < IMU_CLASSES));
    // acc_x of both sensors split into body and gravity
    assert_eq!(all.channel_count(), 7);
    let train = WindowedDataset::load(&dir.path().join("prepared/train.hmrd")).unwrap();
    let test = WindowedDataset::load(&dir.path().join("prepared/test.hmrd")).unwrap();
    assert!(train.subjects().iter().all(|s| !test.subjects().contains(s)));

    let o = run(&["eval", "--config", &cfg, "--folds", "2", "--format", "json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["folds"].as_array().unwrap().len(), 2);
    assert!(r["mean"]["accuracy"].is_number());
    assert_eq!(r["pooled"]["sample_count"].as_u64().unwrap() as usize, all.len());

    let o = run(&["eval", "--config", &cfg, "--folds", "2", "--format", "csv"]);
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[3].starts_with("mean,"));

    let o = run(&["train", "--config", &cfg, "--folds", "2"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn undeclared_csv_column_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_arg(&imu_config(dir.path(), 1));
    let text = String::from_utf8(read(dir.path().join("rec.csv"))).unwrap();
    let text = text.replacen("ankle_gyro_x", "ankle_mag_x", 1);
    std::fs::write(dir.path().join("rec.csv"), text).unwrap();
    let o = run(&["preprocess", "--config", &cfg]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("ankle_mag_x"), "{}", stderr(&o));
}

#[test]
fn usage_and_help() {
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["train"])), 4);
    let o = run(&["--help"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("HMRN_<SECTION>__<FIELD>"));
    assert!(stdout(&o).contains("Exit codes"));
}

#[test]
fn gradcheck_failure_exit_code() {
    let o = run(&["gradcheck", "--corrupt", "relu", "--format", "csv"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    let failed: Vec<String> = stdout(&o)
        .lines()
        .skip(1)
        .filter(|l| l.ends_with(",false"))
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect();
    assert_eq!(failed, vec!["relu"]);
}
