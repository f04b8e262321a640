//! Raw-signal preprocessing and dataset ingestion.
//!
//! Signals pass through missing-value imputation, optional median and
//! low-pass noise filtering, optional gravity separation and sliding-window
//! segmentation before they reach the model as [`WindowedDataset`]s.

mod dataset;
mod filter;
mod imu_csv;
mod split;
mod ucihar;
mod window;

pub use dataset::{DatasetManifest, NormStats, SplitSummary, WindowedDataset, DATASET_FORMAT_VERSION, DATASET_MAGIC};
pub use filter::{butterworth_lowpass, median_filter, separate_gravity, separate_gravity_with, Butterworth, Sos, GRAVITY_CUTOFF_HZ, GRAVITY_ORDER};
pub use imu_csv::{load_multi_imu_csv, FilterConfig, ImuSchema};
pub use split::{split, split_indices, Grouping, SplitMode, SplitSpec};
pub use ucihar::{load_ucihar, load_ucihar_split, write_ucihar_layout, UCIHAR_CHANNELS, UCIHAR_CLASSES, UCIHAR_SENSOR, UCIHAR_WINDOW};
pub use window::{impute_missing, majority_label, sliding_windows, window_count, window_starts, window_step};

/// One scalar signal axis of a sensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalChannel {
    pub sensor: String,
    pub channel: String,
    pub sample_rate: f64,
    pub samples: Vec<f64>,
}

impl SignalChannel {
    pub fn new(sensor: impl Into<String>, channel: impl Into<String>, sample_rate: f64, samples: Vec<f64>) -> crate::Result<Self> {
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(crate::Error::InvalidArgument(format!("sample rate must be positive, got {sample_rate}")));
        }
        Ok(Self {
            sensor: sensor.into(),
            channel: channel.into(),
            sample_rate,
            samples,
        })
    }
}
