//! The JSON run configuration consumed by the CLI and the Python bindings.
//! Absent keys fall back to the reference-experiment values; unknown keys are
//! rejected so typos fail loudly.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::io::load_sample_dir;
use crate::synth::{synth_dataset, Sample};
use crate::train::{train, TrainConfig, TrainSummary};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synth,
    Dir,
}

#[derive(Clone, Debug)]
pub struct DataConfig {
    pub source: DataSource,
    pub count: usize,
    pub path: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalConfig {
    pub threshold: f64,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    train: RawTrain,
    #[serde(default)]
    data: RawData,
    #[serde(default)]
    eval: RawEval,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    height: Option<usize>,
    width: Option<usize>,
    channels: Option<usize>,
    patch_size: Option<usize>,
    heads: Option<usize>,
    layers: Option<usize>,
    mlp_ratio: Option<usize>,
    embed_channels: Option<usize>,
    encoder_widths: Option<Vec<usize>>,
    decoder_widths: Option<Vec<usize>>,
    decoder_convs_per_stage: Option<usize>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    epochs: Option<usize>,
    base_lr: Option<f64>,
    milestones: Option<Vec<usize>>,
    batch_size: Option<usize>,
    weight_decay: Option<f64>,
    seed: Option<u64>,
    gradcheck_mode: Option<bool>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    source: Option<String>,
    count: Option<usize>,
    path: Option<PathBuf>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEval {
    threshold: Option<f64>,
}

impl RawRunConfig {
    fn resolve(self) -> Result<RunConfig> {
        let channels = self.model.channels.unwrap_or(1);
        let encoder_widths = self
            .model
            .encoder_widths
            .unwrap_or_else(|| vec![16, 32, 64, 128, 256]);
        let decoder_widths = self.model.decoder_widths.unwrap_or_else(|| {
            let mut w = encoder_widths.clone();
            w.reverse();
            w
        });
        let seed = self.train.seed.unwrap_or(0);
        let model = ModelConfig {
            height: self.model.height.unwrap_or(512),
            width: self.model.width.unwrap_or(512),
            channels,
            patch_size: self.model.patch_size.unwrap_or(16),
            num_heads: self.model.heads.unwrap_or(8),
            num_layers: self.model.layers.unwrap_or(6),
            mlp_ratio: self.model.mlp_ratio.unwrap_or(4),
            embed_channels: self.model.embed_channels.unwrap_or(channels),
            encoder_widths,
            decoder_widths,
            decoder_convs_per_stage: self.model.decoder_convs_per_stage.unwrap_or(2),
            alpha: 1.0,
            seed,
        };
        model.validate()?;

        let eval = EvalConfig {
            threshold: self.eval.threshold.unwrap_or(0.8),
        };
        let train = TrainConfig {
            epochs: self.train.epochs.unwrap_or(120),
            base_lr: self.train.base_lr.unwrap_or(1e-3),
            milestones: self.train.milestones.unwrap_or_else(|| vec![60, 100]),
            batch_size: self.train.batch_size.unwrap_or(1),
            weight_decay: self.train.weight_decay.unwrap_or(1e-6),
            seed,
            gradcheck_mode: self.train.gradcheck_mode.unwrap_or(false),
            decay_exclude_norms_and_biases: false,
            eval_threshold: eval.threshold,
        };
        train.validate()?;

        let source = match self.data.source.as_deref() {
            None | Some("synth") => DataSource::Synth,
            Some("dir") => DataSource::Dir,
            Some(other) => {
                return Err(Error::Config(format!(
                    "data.source must be \"synth\" or \"dir\", got \"{other}\""
                )))
            }
        };
        if source == DataSource::Dir && self.data.path.is_none() {
            return Err(Error::Config("data.source \"dir\" requires data.path".into()));
        }
        let data = DataConfig {
            source,
            count: self.data.count.unwrap_or(16),
            path: self.data.path,
        };
        if data.source == DataSource::Synth && data.count == 0 {
            return Err(Error::Config("data.count must be ≥ 1".into()));
        }

        Ok(RunConfig {
            model,
            train,
            data,
            eval,
        })
    }
}

impl RunConfig {
    pub fn from_json_str(json: &str) -> Result<Self> {
        let raw: RawRunConfig = serde_json::from_str(json)?;
        raw.resolve()
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_json_str(&text)
    }
}

/// Materialize the configured dataset (synthetic or from a directory of
/// TensorFile pairs), validating shapes against the model config.
pub fn load_dataset(run: &RunConfig) -> Result<Vec<Sample>> {
    let samples = match run.data.source {
        DataSource::Synth => synth_dataset(
            run.train.seed,
            run.data.count,
            run.model.height,
            run.model.width,
        )?,
        DataSource::Dir => load_sample_dir(run.data.path.as_ref().expect("validated"))?,
    };
    for (i, s) in samples.iter().enumerate() {
        let expect = [run.model.channels, run.model.height, run.model.width];
        if s.image.shape() != expect {
            return Err(Error::Config(format!(
                "sample {i} has image shape {:?}, config expects {expect:?}",
                s.image.shape()
            )));
        }
    }
    Ok(samples)
}

/// 80/20 tail split; datasets with fewer than two samples get no val split.
pub fn split_dataset(samples: Vec<Sample>) -> (Vec<Sample>, Vec<Sample>) {
    let n = samples.len();
    if n < 2 {
        return (samples, Vec::new());
    }
    let val = ((n as f64 * 0.2).round() as usize).clamp(1, n - 1);
    let mut train = samples;
    let val_set = train.split_off(n - val);
    (train, val_set)
}

/// End-to-end training driven by a run config: build the dataset, split,
/// train, and leave metrics.csv / last.ckpt / best.ckpt in `out_dir`.
pub fn run_training(run: &RunConfig, out_dir: impl AsRef<Path>) -> Result<TrainSummary> {
    let samples = load_dataset(run)?;
    let (train_set, val_set) = split_dataset(samples);
    train(&run.model, &run.train, &train_set, &val_set, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_yields_reference_defaults() {
        let run = RunConfig::from_json_str("{}").unwrap();
        assert_eq!(run.model.height, 512);
        assert_eq!(run.model.patch_size, 16);
        assert_eq!(run.model.num_heads, 8);
        assert_eq!(run.model.num_layers, 6);
        assert_eq!(run.model.decoder_widths, vec![256, 128, 64, 32, 16]);
        assert_eq!(run.train.epochs, 120);
        assert_eq!(run.train.base_lr, 1e-3);
        assert_eq!(run.train.milestones, vec![60, 100]);
        assert_eq!(run.train.weight_decay, 1e-6);
        assert_eq!(run.eval.threshold, 0.8);
    }

    #[test]
    fn unknown_keys_rejected_everywhere() {
        assert!(RunConfig::from_json_str(r#"{"bogus": 1}"#).is_err());
        assert!(RunConfig::from_json_str(r#"{"model": {"depth": 3}}"#).is_err());
        assert!(RunConfig::from_json_str(r#"{"train": {"lr": 0.1}}"#).is_err());
    }

    #[test]
    fn tiny_json_roundtrip() {
        let json = r#"{
            "model": {"height": 32, "width": 32, "patch_size": 8, "heads": 2,
                      "layers": 1, "encoder_widths": [4, 8], "decoder_widths": [8, 4]},
            "train": {"epochs": 2, "batch_size": 4, "milestones": [1], "seed": 3,
                      "gradcheck_mode": true},
            "data": {"source": "synth", "count": 8},
            "eval": {"threshold": 0.5}
        }"#;
        let run = RunConfig::from_json_str(json).unwrap();
        assert_eq!(run.model.seq_len(), 16);
        assert_eq!(run.model.seed, 3);
        assert_eq!(run.train.eval_threshold, 0.5);
        assert_eq!(run.data.count, 8);
    }

    #[test]
    fn dir_source_requires_path() {
        let err = RunConfig::from_json_str(r#"{"data": {"source": "dir"}}"#).unwrap_err();
        assert!(err.to_string().contains("path"), "{err}");
    }

    #[test]
    fn split_sizes() {
        let samples = crate::synth::synth_dataset(0, 8, 32, 32).unwrap();
        let (tr, va) = split_dataset(samples);
        assert_eq!((tr.len(), va.len()), (6, 2));
        let samples = crate::synth::synth_dataset(0, 2, 32, 32).unwrap();
        let (tr, va) = split_dataset(samples);
        assert_eq!((tr.len(), va.len()), (1, 1));
        let samples = crate::synth::synth_dataset(0, 1, 32, 32).unwrap();
        let (tr, va) = split_dataset(samples);
        assert_eq!((tr.len(), va.len()), (1, 0));
    }
}
