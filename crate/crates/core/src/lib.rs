//! Hierarchical multichannel deep residual network (HMResNet) for human
//! activity recognition from inertial sensor windows.
//!
//! The crate covers the whole pipeline: signal preprocessing and dataset
//! ingestion ([`datapipe`]), the network and its hand-written reverse-mode
//! gradients ([`tensor`], [`layers`], [`model`]), Adam training ([`optim`]),
//! evaluation ([`metrics`]) and finite-difference verification
//! ([`gradcheck`]).
//!
//! Batch and channel loops run on rayon when the `parallel` feature is on
//! (the default). Results are reduced in a fixed order, so sequential and
//! parallel execution are bit-identical.

pub mod codec;
pub mod datapipe;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::Execution;
pub use layers::Mode;
pub use model::{ChannelMode, Gradients, HmresnetModel, ModelConfig, ModelInput, ModelMetadata, Prediction, SensorSpec};
pub use tensor::Tensor;
