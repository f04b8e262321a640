//! Experiment configuration: one JSON document plus environment overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hmrn_core::datapipe::{Grouping, ImuSchema, SplitMode, SplitSpec};
use hmrn_core::model::{ChannelMode, ModelConfig, SensorSpec};
use hmrn_core::optim::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::fail::{validation, Failure};

pub const ENV_PREFIX: &str = "HMRN_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Ucihar,
    Csv,
}

fn default_split() -> SplitSpec {
    SplitSpec::holdout(0.3, Grouping::BySubject, 0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// Smartphone dataset root (the directory holding `train/` and `test/`).
    #[serde(default)]
    pub root: Option<PathBuf>,
    /// CSV recording and its JSON schema.
    #[serde(default)]
    pub csv: Option<PathBuf>,
    #[serde(default)]
    pub schema: Option<PathBuf>,
    /// Channels to keep, as `sensor/channel`.
    #[serde(default)]
    pub channels: Option<Vec<String>>,
    /// Train/test split of CSV recordings, and the grouping of `--folds`.
    #[serde(default = "default_split")]
    pub split: SplitSpec,
}

/// Architecture fields of [`ModelConfig`]; sensors, window length and
/// class count come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub channel_mode: ChannelMode,
    pub mcfeu_stack_depth: usize,
    pub decision_stack_depth: usize,
    pub kernel_sizes: [usize; 3],
    pub bottleneck_widths: [usize; 2],
    pub decision_hidden_widths: [usize; 2],
    pub dropout_rate: f64,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    pub init_sigma2: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::new(Vec::new(), 0, 0);
        Self {
            channel_mode: d.channel_mode,
            mcfeu_stack_depth: d.mcfeu_stack_depth,
            decision_stack_depth: d.decision_stack_depth,
            kernel_sizes: d.kernel_sizes,
            bottleneck_widths: d.bottleneck_widths,
            decision_hidden_widths: d.decision_hidden_widths,
            dropout_rate: d.dropout_rate,
            bn_epsilon: d.bn_epsilon,
            bn_momentum: d.bn_momentum,
            init_sigma2: d.init_sigma2,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, sensors: Vec<SensorSpec>, window_length: usize, class_count: usize) -> ModelConfig {
        let mut c = ModelConfig::new(sensors, window_length, class_count);
        c.channel_mode = self.channel_mode;
        c.mcfeu_stack_depth = self.mcfeu_stack_depth;
        c.decision_stack_depth = self.decision_stack_depth;
        c.kernel_sizes = self.kernel_sizes;
        c.bottleneck_widths = self.bottleneck_widths;
        c.decision_hidden_widths = self.decision_hidden_widths;
        c.dropout_rate = self.dropout_rate;
        c.bn_epsilon = self.bn_epsilon;
        c.bn_momentum = self.bn_momentum;
        c.init_sigma2 = self.init_sigma2;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Directory for preprocessed dataset files and their manifest.
    pub data_dir: PathBuf,
    pub model: PathBuf,
    pub log: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainConfig,
    pub output: OutputSection,
}

/// Sets `path` (dotted, lower-case) inside `doc`, creating objects as
/// needed.
fn set_path(doc: &mut Value, path: &[String], value: Value) -> Result<()> {
    let mut cur = doc;
    for (i, key) in path.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .with_context(|| format!("{} is not an object", path[..i].join(".")))?;
        if i + 1 == path.len() {
            if obj.get(key).is_some_and(Value::is_object) {
                bail!("{} is a section, not a leaf field", path.join("."));
            }
            obj.insert(key.clone(), value);
            return Ok(());
        }
        cur = obj.entry(key.clone()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// `HMRN_SECTION__FIELD[__SUBFIELD]=value` overrides. Values that parse as
/// JSON are used as such, anything else as a string. Variables without a
/// `__` separator are not overrides and are ignored.
pub fn apply_env_overrides(doc: &mut Value, vars: impl Iterator<Item = (String, String)>) -> Result<Vec<String>> {
    let mut vars: Vec<(String, String)> = vars
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k.contains("__"))
        .collect();
    vars.sort();
    let mut applied = Vec::new();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(|s| s.to_ascii_lowercase()).collect();
        if path.iter().any(String::is_empty) {
            bail!("malformed override variable {key}");
        }
        if !["dataset", "model", "training", "output"].contains(&path[0].as_str()) {
            bail!("override {key} names unknown section {:?}", path[0]);
        }
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw.clone()));
        set_path(doc, &path, value).with_context(|| format!("applying {key}"))?;
        applied.push(path.join("."));
    }
    Ok(applied)
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    /// Reads the file, applies environment overrides and resolves relative
    /// paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::input(anyhow::anyhow!("{}: {e}", path.display())))?;
        let mut doc: Value = serde_json::from_str(&text)
            .map_err(|e| validation(anyhow::anyhow!("{}: {e}", path.display())))?;
        apply_env_overrides(&mut doc, std::env::vars()).map_err(validation)?;
        let mut cfg: ExperimentConfig = serde_json::from_value(doc)
            .map_err(|e| validation(anyhow::anyhow!("{}: {e}", path.display())))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset.root, &mut cfg.dataset.csv, &mut cfg.dataset.schema]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
        resolve(base, &mut cfg.output.data_dir);
        resolve(base, &mut cfg.output.model);
        resolve(base, &mut cfg.output.log);
        Ok(cfg)
    }

    /// Checks everything that does not depend on preprocessed data.
    pub fn validate(&self) -> Result<(), Failure> {
        let mut bad = Vec::new();
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Ucihar => match &d.root {
                None => bad.push("dataset.root is required for kind ucihar".to_string()),
                Some(r) if !r.is_dir() => bad.push(format!("dataset.root {} is not a directory", r.display())),
                _ => {}
            },
            DatasetKind::Csv => {
                for (field, p) in [("csv", &d.csv), ("schema", &d.schema)] {
                    match p {
                        None => bad.push(format!("dataset.{field} is required for kind csv")),
                        Some(p) if !p.is_file() => bad.push(format!("dataset.{field} {} does not exist", p.display())),
                        _ => {}
                    }
                }
            }
        }
        if let Err(e) = d.split.validate() {
            bad.push(format!("dataset.split: {e}"));
        }
        if let Err(e) = self.training.validate() {
            bad.push(format!("training: {e}"));
        }
        // architecture fields checked against a placeholder layout
        let probe = self
            .model
            .model_config(vec![SensorSpec::new("s", &["c"])], 16, 2);
        if let Err(e) = probe.validate() {
            bad.push(format!("model: {e}"));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(validation(anyhow::anyhow!("invalid configuration:\n  {}", bad.join("\n  "))))
        }
    }

    pub fn load_schema(&self) -> Result<ImuSchema, Failure> {
        let p = self
            .dataset
            .schema
            .as_ref()
            .ok_or_else(|| validation(anyhow::anyhow!("dataset.schema is required for kind csv")))?;
        let text = std::fs::read_to_string(p).map_err(|e| Failure::input(anyhow::anyhow!("{}: {e}", p.display())))?;
        let schema: ImuSchema =
            serde_json::from_str(&text).map_err(|e| validation(anyhow::anyhow!("{}: {e}", p.display())))?;
        schema
            .validate()
            .map_err(|e| validation(anyhow::anyhow!("{}: {e}", p.display())))?;
        Ok(schema)
    }

    /// The configured split turned into a `k`-fold spec.
    pub fn fold_spec(&self, k: usize, seed: u64) -> SplitSpec {
        let mut s = self.dataset.split.clone();
        s.mode = SplitMode::KFold;
        s.k = k;
        s.seed = seed;
        s
    }
}
