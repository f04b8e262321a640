//! Windowed, labelled samples plus their on-disk form.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelInput, SensorSpec};
use crate::optim::Batch;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"HMRD";
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Per-channel z-score statistics, in sensor-then-channel order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub channels: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Each sample is stored as one `[C × L]` tensor whose rows follow the
/// sensor-then-channel order of `sensors`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedDataset {
    sensors: Vec<SensorSpec>,
    window_length: usize,
    windows: Vec<Tensor>,
    labels: Vec<usize>,
    subjects: Vec<u32>,
    class_names: Vec<String>,
    normalization: Option<NormStats>,
}

fn qualified(sensors: &[SensorSpec]) -> Vec<String> {
    sensors
        .iter()
        .flat_map(|s| s.channels.iter().map(move |c| format!("{}/{c}", s.name)))
        .collect()
}

impl WindowedDataset {
    pub fn new(
        sensors: Vec<SensorSpec>,
        window_length: usize,
        windows: Vec<Tensor>,
        labels: Vec<usize>,
        subjects: Vec<u32>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let channels: usize = sensors.iter().map(|s| s.channels.len()).sum();
        if channels == 0 || window_length == 0 {
            return Err(Error::Data("dataset needs at least one channel and a non-empty window".into()));
        }
        if labels.len() != windows.len() || subjects.len() != windows.len() {
            return Err(Error::Data(format!(
                "{} windows, {} labels and {} subjects must match",
                windows.len(),
                labels.len(),
                subjects.len()
            )));
        }
        if let Some(i) = windows.iter().position(|w| w.shape() != [channels, window_length]) {
            return Err(Error::shape(
                "dataset",
                format!("window {i} is {:?}, expected [{channels}, {window_length}]", windows[i].shape()),
            ));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= class_names.len()) {
            return Err(Error::Label {
                index,
                label,
                classes: class_names.len(),
            });
        }
        Ok(Self {
            sensors,
            window_length,
            windows,
            labels,
            subjects,
            class_names,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn sensors(&self) -> &[SensorSpec] {
        &self.sensors
    }

    pub fn channel_count(&self) -> usize {
        self.sensors.iter().map(|s| s.channels.len()).sum()
    }

    pub fn window_length(&self) -> usize {
        self.window_length
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subjects(&self) -> &[u32] {
        &self.subjects
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn normalization(&self) -> Option<&NormStats> {
        self.normalization.as_ref()
    }

    /// The `[C × L]` tensor of sample `i`.
    pub fn window(&self, i: usize) -> &Tensor {
        &self.windows[i]
    }

    /// Sample `i` as `[1 × L]` per-channel windows.
    pub fn sample(&self, i: usize) -> Vec<Tensor> {
        let w = &self.windows[i];
        (0..w.dim(0))
            .map(|c| Tensor::new(vec![1, self.window_length], w.outer(c).to_vec()).expect("row has window length"))
            .collect()
    }

    /// One channel of sample `i`, addressed by sensor and channel name.
    pub fn channel(&self, i: usize, sensor: &str, channel: &str) -> Option<&[f64]> {
        let mut row = 0;
        for s in &self.sensors {
            if s.name == sensor {
                return s.channels.iter().position(|c| c == channel).map(|c| self.windows[i].outer(row + c));
            }
            row += s.channels.len();
        }
        None
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!("sample index {bad} out of range for {} samples", self.len())));
        }
        Ok(Self {
            sensors: self.sensors.clone(),
            window_length: self.window_length,
            windows: indices.iter().map(|&i| self.windows[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            subjects: indices.iter().map(|&i| self.subjects[i]).collect(),
            class_names: self.class_names.clone(),
            normalization: self.normalization.clone(),
        })
    }

    /// Appends `other`; both must share layout, classes and normalization.
    pub fn concat(&self, other: &WindowedDataset) -> Result<Self> {
        if self.sensors != other.sensors
            || self.window_length != other.window_length
            || self.class_names != other.class_names
            || self.normalization != other.normalization
        {
            return Err(Error::Data("cannot concatenate datasets with different layouts".into()));
        }
        let mut out = self.clone();
        out.windows.extend(other.windows.iter().cloned());
        out.labels.extend_from_slice(&other.labels);
        out.subjects.extend_from_slice(&other.subjects);
        Ok(out)
    }

    /// Keeps the named channels (as `sensor/channel`) in the given order,
    /// grouped by sensor in first-appearance order.
    pub fn select_channels(&self, names: &[String]) -> Result<Self> {
        let all = qualified(&self.sensors);
        let mut rows = Vec::with_capacity(names.len());
        let mut sensors: Vec<SensorSpec> = Vec::new();
        for name in names {
            let row = all
                .iter()
                .position(|q| q == name)
                .ok_or_else(|| Error::Data(format!("unknown channel {name}; available: {}", all.join(", "))))?;
            if rows.contains(&row) {
                return Err(Error::Data(format!("channel {name} selected twice")));
            }
            let (sensor, channel) = name.split_once('/').expect("qualified names contain '/'");
            match sensors.iter_mut().find(|s| s.name == sensor) {
                Some(s) => s.channels.push(channel.to_string()),
                None => sensors.push(SensorSpec {
                    name: sensor.to_string(),
                    channels: vec![channel.to_string()],
                }),
            }
            rows.push(row);
        }
        // reorder rows to match the grouped layout
        let grouped = qualified(&sensors);
        let rows: Vec<usize> = grouped.iter().map(|q| all.iter().position(|a| a == q).unwrap()).collect();
        let l = self.window_length;
        let windows = self
            .windows
            .iter()
            .map(|w| {
                let data = rows.iter().flat_map(|&r| w.outer(r).iter().copied()).collect();
                Tensor::new(vec![rows.len(), l], data).expect("selected rows")
            })
            .collect();
        let normalization = self.normalization.as_ref().map(|n| NormStats {
            channels: grouped.clone(),
            mean: rows.iter().map(|&r| n.mean[r]).collect(),
            std: rows.iter().map(|&r| n.std[r]).collect(),
        });
        Ok(Self {
            sensors,
            window_length: l,
            windows,
            labels: self.labels.clone(),
            subjects: self.subjects.clone(),
            class_names: self.class_names.clone(),
            normalization,
        })
    }

    /// Mean and population standard deviation of every channel over all
    /// samples and time steps. A constant channel gets std 1.
    pub fn fit_normalization(&self) -> Result<NormStats> {
        if self.is_empty() {
            return Err(Error::Data("cannot fit normalization on an empty dataset".into()));
        }
        let c = self.channel_count();
        let n = (self.len() * self.window_length) as f64;
        let mut mean = vec![0.0; c];
        for w in &self.windows {
            for (r, m) in mean.iter_mut().enumerate() {
                *m += w.outer(r).iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for w in &self.windows {
            for (r, v) in var.iter_mut().enumerate() {
                *v += w.outer(r).iter().map(|x| (x - mean[r]).powi(2)).sum::<f64>();
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 0.0 { s } else { 1.0 }
            })
            .collect();
        Ok(NormStats {
            channels: qualified(&self.sensors),
            mean,
            std,
        })
    }

    /// Applies `(x - mean) / std` per channel. Normalizing twice is an error.
    pub fn normalize(&mut self, stats: &NormStats) -> Result<()> {
        if self.normalization.is_some() {
            return Err(Error::Data("dataset is already normalized".into()));
        }
        if stats.channels != qualified(&self.sensors) || stats.mean.len() != stats.channels.len() || stats.std.len() != stats.channels.len() {
            return Err(Error::Data("normalization statistics describe different channels".into()));
        }
        if let Some(s) = stats.std.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Data(format!("normalization std must be positive, got {s}")));
        }
        for w in &mut self.windows {
            for (r, (m, s)) in stats.mean.iter().zip(&stats.std).enumerate() {
                w.outer_mut(r).iter_mut().for_each(|x| *x = (*x - m) / s);
            }
        }
        self.normalization = Some(stats.clone());
        Ok(())
    }

    /// Fails early when the dataset cannot feed a model built from `config`.
    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        let mut bad = Vec::new();
        if self.sensors != config.sensors {
            bad.push(format!(
                "dataset channels [{}] differ from model channels [{}]",
                qualified(&self.sensors).join(", "),
                qualified(&config.sensors).join(", ")
            ));
        }
        if self.window_length != config.window_length {
            bad.push(format!(
                "dataset window length {} differs from model window length {}",
                self.window_length, config.window_length
            ));
        }
        if self.class_names.len() != config.class_count {
            bad.push(format!(
                "dataset has {} classes, model has {}",
                self.class_names.len(),
                config.class_count
            ));
        }
        if bad.is_empty() { Ok(()) } else { Err(Error::Config(bad)) }
    }

    /// Gathers samples into per-channel `[B × 1 × L]` tensors.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!("sample index {bad} out of range for {} samples", self.len())));
        }
        let (b, l) = (indices.len(), self.window_length);
        let windows = (0..self.channel_count())
            .map(|c| {
                let mut data = Vec::with_capacity(b * l);
                for &i in indices {
                    data.extend_from_slice(self.windows[i].outer(c));
                }
                Tensor::new(vec![b, 1, l], data).expect("gathered batch")
            })
            .collect();
        Ok(Batch {
            input: ModelInput::new(windows)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    // -----------------------------------------------------------------------
    // file form

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = FileHeader {
            sensors: self.sensors.clone(),
            window_length: self.window_length,
            class_names: self.class_names.clone(),
            labels: self.labels.clone(),
            subjects: self.subjects.clone(),
            normalized_channels: self.normalization.as_ref().map(|n| n.channels.clone()),
        };
        let json = serde_json::to_vec(&header)?;
        let mut tensors = BTreeMap::new();
        let (n, c, l) = (self.len(), self.channel_count(), self.window_length);
        let mut data = Vec::with_capacity(n * c * l);
        for w in &self.windows {
            data.extend_from_slice(w.data());
        }
        tensors.insert("windows".to_string(), Tensor::new(vec![n, c, l], data)?);
        if let Some(norm) = &self.normalization {
            tensors.insert("norm.mean".to_string(), Tensor::vector(norm.mean.clone()));
            tensors.insert("norm.std".to_string(), Tensor::vector(norm.std.clone()));
        }
        Ok(crate::codec::encode(DATASET_MAGIC, DATASET_FORMAT_VERSION, &json, tensors.iter()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut decoded = crate::codec::decode(bytes, DATASET_MAGIC, DATASET_FORMAT_VERSION)?;
        let h: FileHeader = serde_json::from_slice(&decoded.header)?;
        let all = decoded
            .tensors
            .remove("windows")
            .ok_or_else(|| Error::Malformed("missing windows tensor".into()))?;
        let c: usize = h.sensors.iter().map(|s| s.channels.len()).sum();
        let n = h.labels.len();
        if all.shape() != [n, c, h.window_length] {
            return Err(Error::Malformed(format!(
                "windows tensor is {:?}, header implies [{n}, {c}, {}]",
                all.shape(),
                h.window_length
            )));
        }
        let windows = all
            .data()
            .chunks_exact(c * h.window_length)
            .map(|d| Tensor::new(vec![c, h.window_length], d.to_vec()))
            .collect::<Result<_>>()?;
        let mut ds = Self::new(h.sensors, h.window_length, windows, h.labels, h.subjects, h.class_names)
            .map_err(|e| Error::Malformed(e.to_string()))?;
        if let Some(channels) = h.normalized_channels {
            let mut take = |k: &str| {
                decoded
                    .tensors
                    .remove(k)
                    .map(|t| t.into_data())
                    .ok_or_else(|| Error::Malformed(format!("missing {k} tensor")))
            };
            let (mean, std) = (take("norm.mean")?, take("norm.std")?);
            if mean.len() != channels.len() || std.len() != channels.len() {
                return Err(Error::Malformed("normalization tensors disagree with channel list".into()));
            }
            ds.normalization = Some(NormStats { channels, mean, std });
        }
        if let Some(extra) = decoded.tensors.keys().next() {
            return Err(Error::Malformed(format!("unexpected tensor {extra}")));
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::codec::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    sensors: Vec<SensorSpec>,
    window_length: usize,
    class_names: Vec<String>,
    labels: Vec<usize>,
    subjects: Vec<u32>,
    normalized_channels: Option<Vec<String>>,
}

/// Per-split summary inside a [`DatasetManifest`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub file: String,
    pub windows: usize,
    pub class_counts: Vec<usize>,
    pub subjects: Vec<u32>,
}

/// JSON sidecar written next to preprocessed dataset files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub source: String,
    pub sensors: Vec<SensorSpec>,
    pub window_length: usize,
    pub overlap: f64,
    pub sample_rate: f64,
    pub class_names: Vec<String>,
    pub splits: BTreeMap<String, SplitSummary>,
    pub filters: serde_json::Value,
    pub normalization: Option<NormStats>,
}

impl SplitSummary {
    pub fn of(file: impl Into<String>, ds: &WindowedDataset) -> Self {
        let mut subjects = ds.subjects().to_vec();
        subjects.sort_unstable();
        subjects.dedup();
        Self {
            file: file.into(),
            windows: ds.len(),
            class_counts: ds.class_counts(),
            subjects,
        }
    }
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        crate::codec::write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy(n: usize) -> WindowedDataset {
        let sensors = vec![SensorSpec::new("imu", &["x", "y"]), SensorSpec::new("arm", &["z"])];
        let windows = (0..n)
            .map(|i| Tensor::new(vec![3, 4], (0..12).map(|k| (i * 12 + k) as f64).collect()).unwrap())
            .collect();
        WindowedDataset::new(
            sensors,
            4,
            windows,
            (0..n).map(|i| i % 2).collect(),
            (0..n).map(|i| (i / 3) as u32).collect(),
            vec!["a".into(), "b".into()],
        )
        .unwrap()
    }

    #[test]
    fn rejects_inconsistent_parts() {
        let s = vec![SensorSpec::new("imu", &["x"])];
        let w = vec![Tensor::zeros(&[1, 4])];
        assert!(WindowedDataset::new(s.clone(), 4, w.clone(), vec![0], vec![], vec!["a".into()]).is_err());
        assert!(matches!(
            WindowedDataset::new(s.clone(), 4, w.clone(), vec![1], vec![0], vec!["a".into()]),
            Err(Error::Label { label: 1, .. })
        ));
        assert!(WindowedDataset::new(s, 5, w, vec![0], vec![0], vec!["a".into()]).is_err());
    }

    #[test]
    fn batch_layout() {
        let ds = toy(4);
        let b = ds.batch(&[2, 0]).unwrap();
        assert_eq!(b.labels, vec![0, 0]);
        let ch = b.input.channels();
        assert_eq!(ch.len(), 3);
        assert_eq!(ch[1].shape(), &[2, 1, 4]);
        assert_eq!(ch[1].data(), &[28.0, 29.0, 30.0, 31.0, 4.0, 5.0, 6.0, 7.0]);
        assert_eq!(ds.channel(2, "arm", "z").unwrap(), &[32.0, 33.0, 34.0, 35.0]);
        assert!(ds.batch(&[9]).is_err());
    }

    #[test]
    fn normalization_guard() {
        let mut ds = toy(5);
        let stats = ds.fit_normalization().unwrap();
        ds.normalize(&stats).unwrap();
        let refit = ds.fit_normalization().unwrap();
        assert!(refit.mean.iter().all(|m| m.abs() < 1e-9));
        assert!(refit.std.iter().all(|s| (s - 1.0).abs() < 1e-9));
        assert!(ds.normalize(&stats).is_err());

        // re-applying identity stats to fresh data leaves it within 1e-9
        let mut fresh = toy(5);
        let snapshot = fresh.clone();
        let identity = NormStats {
            channels: stats.channels.clone(),
            mean: vec![0.0; 3],
            std: vec![1.0; 3],
        };
        fresh.normalize(&identity).unwrap();
        for i in 0..5 {
            assert!(fresh.window(i).max_abs_diff(snapshot.window(i)) < 1e-9);
        }
    }

    #[test]
    fn concat_appends() {
        let a = toy(2);
        let c = a.concat(&toy(3)).unwrap();
        assert_eq!(c.len(), 5);
        assert_eq!(c.window(4), toy(3).window(2));
        let mut n = toy(1);
        n.normalize(&n.fit_normalization().unwrap()).unwrap();
        assert!(a.concat(&n).is_err());
    }

    #[test]
    fn channel_selection_regroups() {
        let ds = toy(2);
        let sel = ds.select_channels(&["arm/z".into(), "imu/x".into()]).unwrap();
        assert_eq!(sel.sensors()[0].name, "arm");
        assert_eq!(sel.window(1).outer(0), ds.window(1).outer(2));
        assert_eq!(sel.window(1).outer(1), ds.window(1).outer(0));
        assert!(ds.select_channels(&["imu/q".into()]).is_err());
    }

    #[test]
    fn file_roundtrip_is_exact() {
        let mut ds = toy(3);
        ds.windows[1].data_mut()[0] = 0.1 + 0.2;
        let stats = ds.fit_normalization().unwrap();
        ds.normalize(&stats).unwrap();
        let bytes = ds.to_bytes().unwrap();
        let back = WindowedDataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn compatibility_lists_every_problem() {
        let ds = toy(2);
        let mut cfg = ModelConfig::new(ds.sensors().to_vec(), 5, 3);
        let Err(Error::Config(v)) = ds.check_compatible(&cfg) else { panic!() };
        assert_eq!(v.len(), 2);
        cfg.window_length = 4;
        cfg.class_count = 2;
        ds.check_compatible(&cfg).unwrap();
    }
}
