//! TUnet: a Transformer-Unet hybrid for binary segmentation, self-contained
//! on CPU. A vision-transformer encoder processes raw image patches; its
//! output is reshaped into a feature map and decoded by a Unet decoder fed
//! with skip connections from an auxiliary CNN encoder.
//!
//! The crate covers the full desk-scale workflow: a tape-based reverse-mode
//! autodiff engine ([`tape`]), the model itself ([`model`]), BCE + AdamW
//! training with a staged learning-rate schedule ([`optim`], [`train`]),
//! segmentation metrics ([`metrics`]), binary tensor/checkpoint formats and
//! synthetic data ([`io`], [`synth`]), and finite-difference gradient
//! verification ([`gradcheck`]).

pub mod config;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod run_config;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use metrics::{ConfusionCounts, MetricsReport};
pub use model::TUnetParams;
pub use run_config::RunConfig;
pub use synth::Sample;
pub use tape::{Precision, Tape, Var};
pub use tensor::Tensor;
pub use train::TrainConfig;
