//! Generic CSV ingestion for continuous multi-IMU recordings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SensorSpec;
use crate::tensor::Tensor;

use super::filter::{median_filter, separate_gravity_with, Butterworth};
use super::window::{impute_missing, majority_label, window_starts};
use super::WindowedDataset;

fn default_median_width() -> usize {
    3
}
fn default_noise_cutoff() -> Option<f64> {
    Some(20.0)
}
fn default_order() -> usize {
    3
}
fn default_gravity_cutoff() -> f64 {
    super::GRAVITY_CUTOFF_HZ
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    #[serde(default = "default_true")]
    pub median: bool,
    #[serde(default = "default_median_width")]
    pub median_width: usize,
    /// `None` disables the noise low-pass. A cutoff at or above the Nyquist
    /// frequency of the recording is skipped.
    #[serde(default = "default_noise_cutoff")]
    pub noise_cutoff_hz: Option<f64>,
    #[serde(default = "default_order")]
    pub noise_order: usize,
    /// Channels (by name, within every sensor) split into `<name>_body` and
    /// `<name>_gravity`.
    #[serde(default)]
    pub gravity_channels: Vec<String>,
    #[serde(default = "default_gravity_cutoff")]
    pub gravity_cutoff_hz: f64,
    #[serde(default = "default_order")]
    pub gravity_order: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            median: true,
            median_width: default_median_width(),
            noise_cutoff_hz: default_noise_cutoff(),
            noise_order: default_order(),
            gravity_channels: Vec::new(),
            gravity_cutoff_hz: default_gravity_cutoff(),
            gravity_order: default_order(),
        }
    }
}

fn default_window() -> usize {
    25
}
fn default_overlap() -> f64 {
    0.8
}
fn default_label() -> String {
    "label".into()
}

/// JSON description of a CSV recording. Columns are named
/// `<sensor>_<channel>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImuSchema {
    pub sensors: Vec<SensorSpec>,
    pub sample_rate: f64,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_overlap")]
    pub overlap: f64,
    #[serde(default = "default_label")]
    pub label_column: String,
    #[serde(default)]
    pub subject_column: Option<String>,
    pub class_names: Vec<String>,
    #[serde(default)]
    pub filters: FilterConfig,
}

impl ImuSchema {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.sensors.is_empty() || self.sensors.iter().any(|s| s.channels.is_empty()) {
            bad.push("every schema needs at least one sensor with channels".to_string());
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            bad.push(format!("sample_rate must be positive, got {}", self.sample_rate));
        }
        if let Err(e) = super::window_step(self.window, self.overlap) {
            bad.push(e.to_string());
        }
        if self.class_names.is_empty() {
            bad.push("class_names must not be empty".into());
        }
        let f = &self.filters;
        if f.median && (f.median_width == 0 || f.median_width % 2 == 0) {
            bad.push(format!("median_width must be odd, got {}", f.median_width));
        }
        if let Some(c) = f.noise_cutoff_hz {
            if !(c > 0.0) || f.noise_order == 0 {
                bad.push("noise filter needs a positive cutoff and order".into());
            }
        }
        if !f.gravity_channels.is_empty() {
            if !(f.gravity_cutoff_hz > 0.0 && f.gravity_cutoff_hz < self.sample_rate / 2.0) || f.gravity_order == 0 {
                bad.push("gravity filter needs a cutoff below Nyquist and a positive order".into());
            }
            for g in &f.gravity_channels {
                if !self.sensors.iter().any(|s| s.channels.contains(g)) {
                    bad.push(format!("gravity channel {g} is not declared by any sensor"));
                }
            }
        }
        if bad.is_empty() { Ok(()) } else { Err(Error::Config(bad)) }
    }

    pub fn column_names(&self) -> Vec<String> {
        self.sensors
            .iter()
            .flat_map(|s| s.channels.iter().map(move |c| format!("{}_{c}", s.name)))
            .collect()
    }

    /// Sensor layout after gravity separation.
    pub fn output_sensors(&self) -> Vec<SensorSpec> {
        self.sensors
            .iter()
            .map(|s| SensorSpec {
                name: s.name.clone(),
                channels: s
                    .channels
                    .iter()
                    .flat_map(|c| {
                        if self.filters.gravity_channels.contains(c) {
                            vec![format!("{c}_body"), format!("{c}_gravity")]
                        } else {
                            vec![c.clone()]
                        }
                    })
                    .collect(),
            })
            .collect()
    }

    /// Whether the noise low-pass actually runs at this sample rate.
    pub fn noise_filter_active(&self) -> bool {
        self.filters.noise_cutoff_hz.is_some_and(|c| c < self.sample_rate / 2.0)
    }
}

struct Recording {
    /// column-major samples, one vector per declared channel
    columns: Vec<Vec<Option<f64>>>,
    labels: Vec<usize>,
    subjects: Vec<u32>,
}

fn read_csv(path: &Path, schema: &ImuSchema) -> Result<Recording> {
    let file = path.display().to_string();
    let perr = |line: usize, column: usize, message: String| Error::Parse {
        file: file.clone(),
        line,
        column,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Data(format!("{file}: {other:?}")),
        })?;
    let header = reader
        .headers()
        .map_err(|e| perr(1, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    if header.iter().all(|h| h.is_empty()) {
        return Err(Error::Data(format!("{file} is empty")));
    }

    let declared = schema.column_names();
    let mut index = vec![usize::MAX; declared.len()];
    let mut label_col = None;
    let mut subject_col = None;
    for (col, name) in header.iter().enumerate() {
        if *name == schema.label_column {
            label_col = Some(col);
        } else if schema.subject_column.as_deref() == Some(name.as_str()) {
            subject_col = Some(col);
        } else if let Some(d) = declared.iter().position(|d| d == name) {
            if index[d] != usize::MAX {
                return Err(perr(1, col + 1, format!("column {name} appears twice")));
            }
            index[d] = col;
        } else {
            return Err(perr(1, col + 1, format!("undeclared column {name:?}")));
        }
    }
    if let Some(d) = index.iter().position(|&i| i == usize::MAX) {
        return Err(Error::Data(format!("{file}: declared column {} is missing", declared[d])));
    }
    let label_col = label_col.ok_or_else(|| Error::Data(format!("{file}: label column {} is missing", schema.label_column)))?;
    if let (Some(name), None) = (&schema.subject_column, subject_col) {
        return Err(Error::Data(format!("{file}: subject column {name} is missing")));
    }

    let mut rec = Recording {
        columns: vec![Vec::new(); declared.len()],
        labels: Vec::new(),
        subjects: Vec::new(),
    };
    for (row, result) in reader.records().enumerate() {
        let line = row + 2;
        let record = result.map_err(|e| perr(line, 1, e.to_string()))?;
        if record.len() != header.len() {
            return Err(perr(line, record.len() + 1, format!("expected {} cells, found {}", header.len(), record.len())));
        }
        for (d, &col) in index.iter().enumerate() {
            let cell = &record[col];
            let v = if cell.is_empty() || cell.eq_ignore_ascii_case("nan") || cell.eq_ignore_ascii_case("na") {
                None
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| perr(line, col + 1, format!("{cell:?} in column {} is not a number", header[col])))?;
                v.is_finite().then_some(v)
            };
            rec.columns[d].push(v);
        }
        let cell = &record[label_col];
        let label = match cell.parse::<usize>() {
            Ok(l) if l < schema.class_names.len() => l,
            Ok(l) => {
                return Err(perr(line, label_col + 1, format!("label {l} is outside [0, {})", schema.class_names.len())));
            }
            Err(_) => schema
                .class_names
                .iter()
                .position(|c| c == cell)
                .ok_or_else(|| perr(line, label_col + 1, format!("unknown label {cell:?}")))?,
        };
        rec.labels.push(label);
        let subject = match subject_col {
            Some(col) => record[col]
                .parse::<u32>()
                .map_err(|_| perr(line, col + 1, format!("subject {:?} is not a non-negative integer", &record[col])))?,
            None => 0,
        };
        rec.subjects.push(subject);
    }
    if rec.labels.is_empty() {
        return Err(Error::Data(format!("{file} has a header but no samples")));
    }
    Ok(rec)
}

/// Reads a CSV recording and turns it into labelled windows. Rows are split
/// into runs of constant subject; windows never straddle two runs.
pub fn load_multi_imu_csv(path: &Path, schema: &ImuSchema) -> Result<WindowedDataset> {
    schema.validate()?;
    let rec = read_csv(path, schema)?;
    let f = &schema.filters;
    let noise = match f.noise_cutoff_hz {
        Some(c) if schema.noise_filter_active() => Some(Butterworth::lowpass(f.noise_order, c, schema.sample_rate)?),
        _ => None,
    };
    let channel_names: Vec<&String> = schema.sensors.iter().flat_map(|s| s.channels.iter()).collect();
    let out_channels: usize = schema.output_sensors().iter().map(|s| s.channels.len()).sum();
    let l = schema.window;

    let mut windows = Vec::new();
    let mut labels = Vec::new();
    let mut subjects = Vec::new();
    let mut start = 0;
    while start < rec.labels.len() {
        let subject = rec.subjects[start];
        let end = rec.subjects[start..].iter().position(|&s| s != subject).map_or(rec.labels.len(), |p| start + p);
        let len = end - start;
        if len >= l {
            let mut processed: Vec<Vec<f64>> = Vec::with_capacity(out_channels);
            for (d, name) in channel_names.iter().enumerate() {
                let mut x = impute_missing(&rec.columns[d][start..end]).map_err(|e| {
                    Error::Data(format!("{}: column {}: rows {}..{}: {e}", path.display(), schema.column_names()[d], start + 2, end + 1))
                })?;
                if f.median {
                    x = median_filter(&x, f.median_width)?;
                }
                if let Some(filter) = &noise {
                    x = filter.apply_zero_phase(&x);
                }
                if f.gravity_channels.contains(name) {
                    let (g, b) = separate_gravity_with(&x, schema.sample_rate, f.gravity_cutoff_hz, f.gravity_order)?;
                    processed.push(b);
                    processed.push(g);
                } else {
                    processed.push(x);
                }
            }
            for s in window_starts(len, l, schema.overlap)? {
                let mut data = Vec::with_capacity(out_channels * l);
                for ch in &processed {
                    data.extend_from_slice(&ch[s..s + l]);
                }
                windows.push(Tensor::new(vec![out_channels, l], data)?);
                labels.push(majority_label(&rec.labels[start + s..start + s + l]).expect("window is non-empty"));
                subjects.push(subject);
            }
        }
        start = end;
    }
    if windows.is_empty() {
        return Err(Error::Data(format!(
            "{} yields no complete window of {l} samples",
            path.display()
        )));
    }
    WindowedDataset::new(schema.output_sensors(), l, windows, labels, subjects, schema.class_names.clone())
}
