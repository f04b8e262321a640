#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hmrn_core::datapipe::{write_ucihar_layout, WindowedDataset, UCIHAR_CHANNELS, UCIHAR_CLASSES, UCIHAR_SENSOR, UCIHAR_WINDOW};
use hmrn_core::{SensorSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub fn hmrn() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hmrn"));
    // keep overrides from the caller's environment out of the tests
    for (k, _) in std::env::vars() {
        if k.starts_with("HMRN_") {
            c.env_remove(k);
        }
    }
    c
}

pub fn run(args: &[&str]) -> Output {
    hmrn().args(args).output().expect("spawn hmrn")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// Smartphone-layout windows: each class is a distinct tone per channel plus
/// noise, subjects cycle through `subjects`.
pub fn smartphone_windows(n: usize, subjects: &[u32], seed: u64) -> WindowedDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = UCIHAR_WINDOW;
    let c = UCIHAR_CHANNELS.len();
    let mut windows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % UCIHAR_CLASSES.len();
        let freq = 0.04 * (class + 1) as f64;
        let phase = rng.gen_range(0.0..6.28);
        let data = (0..c * l)
            .map(|j| {
                let (ch, t) = (j / l, (j % l) as f64);
                let offset = if ch >= 6 { 1.0 - 0.1 * class as f64 } else { 0.0 };
                offset + (freq * t + phase + ch as f64).sin() * 0.5 + rng.gen_range(-0.2..0.2)
            })
            .collect();
        windows.push(Tensor::new(vec![c, l], data).unwrap());
        labels.push(class);
    }
    WindowedDataset::new(
        vec![SensorSpec::new(UCIHAR_SENSOR, &UCIHAR_CHANNELS)],
        l,
        windows,
        labels,
        (0..n).map(|i| subjects[i % subjects.len()]).collect(),
        UCIHAR_CLASSES.iter().map(|s| s.to_string()).collect(),
    )
    .unwrap()
}

/// A `train/` + `test/` tree in the smartphone dataset's text layout.
pub fn write_smartphone_tree(root: &Path, train: usize, test: usize) {
    write_ucihar_layout(root, "train", &smartphone_windows(train, &[1, 3, 5, 6], 1)).unwrap();
    write_ucihar_layout(root, "test", &smartphone_windows(test, &[2, 4], 2)).unwrap();
}

/// A deliberately small architecture so CLI round trips stay fast.
pub fn small_model() -> Value {
    json!({
        "mcfeu_stack_depth": 1,
        "bottleneck_widths": [16, 16],
        "decision_hidden_widths": [16, 16]
    })
}

/// Writes `config.json` under `dir` for the smartphone tree at `dir/raw`.
pub fn smartphone_config(dir: &Path, epochs: usize) -> PathBuf {
    let cfg = json!({
        "dataset": { "kind": "ucihar", "root": "raw" },
        "model": small_model(),
        "training": { "epochs": epochs, "batch_size": 8, "seed": 7 },
        "output": { "data_dir": "prepared", "model": "out/model.hmrn", "log": "out/train.jsonl" }
    });
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

pub const IMU_CLASSES: usize = 12;

/// A continuous two-sensor recording with 12 activities, four subjects and
/// runs of `run` samples per activity.
pub fn write_imu_csv(path: &Path, run: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::from("subject,label,wrist_acc_x,wrist_acc_y,wrist_gyro_x,ankle_acc_x,ankle_gyro_x\n");
    for subject in 1..=4u32 {
        for class in 0..IMU_CLASSES {
            let f = 0.05 * (class + 1) as f64;
            for t in 0..run {
                let t = t as f64;
                let vals: Vec<String> = (0..5)
                    .map(|c| {
                        let g = if c == 0 { 9.81 } else { 0.0 };
                        format!("{:.6}", g + (f * t + c as f64).sin() + rng.gen_range(-0.1..0.1))
                    })
                    .collect();
                out.push_str(&format!("{subject},{class},{}\n", vals.join(",")));
            }
        }
    }
    std::fs::write(path, out).unwrap();
}

pub fn imu_schema() -> Value {
    json!({
        "sensors": [
            { "name": "wrist", "channels": ["acc_x", "acc_y", "gyro_x"] },
            { "name": "ankle", "channels": ["acc_x", "gyro_x"] }
        ],
        "sample_rate": 50.0,
        "window": 25,
        "overlap": 0.8,
        "subject_column": "subject",
        "class_names": (0..IMU_CLASSES).map(|c| format!("activity{c}")).collect::<Vec<_>>(),
        "filters": { "gravity_channels": ["acc_x"] }
    })
}

/// CSV recording, schema and config under `dir`; returns the config path.
pub fn imu_config(dir: &Path, epochs: usize) -> PathBuf {
    write_imu_csv(&dir.join("rec.csv"), 60, 3);
    std::fs::write(dir.join("schema.json"), imu_schema().to_string()).unwrap();
    let cfg = json!({
        "dataset": {
            "kind": "csv",
            "csv": "rec.csv",
            "schema": "schema.json",
            "split": { "mode": "fixed-holdout", "grouping": "by-subject", "holdout_fraction": 0.25, "seed": 1 }
        },
        "model": small_model(),
        "training": { "epochs": epochs, "batch_size": 16, "seed": 3 },
        "output": { "data_dir": "prepared", "model": "out/model.hmrn", "log": "out/train.jsonl" }
    });
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

pub fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}
