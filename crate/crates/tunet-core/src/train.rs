//! The training loop: seeded shuffling, batched forward/backward, AdamW with
//! the staged learning-rate schedule, per-epoch evaluation rows, and final /
//! best-Dice checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::io::{save_checkpoint, Dtype};
use crate::metrics::{binarize, compute_metrics, confusion, ConfusionCounts, MetricsReport};
use crate::model::{bind, forward, harvest_grads, init_params, TUnetParams};
use crate::optim::{bce_loss_value, lr_at, AdamWConfig, AdamWState};
use crate::rng;
use crate::synth::Sample;
use crate::tape::{Precision, Tape};

pub const METRICS_FILE: &str = "metrics.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const CSV_HEADER: &str = "epoch,split,loss,miou,dice,pixel_acc,precision,recall";

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// 64-bit mode: required for finite-difference work and bit-reproducible runs.
    pub gradcheck_mode: bool,
    pub decay_exclude_norms_and_biases: bool,
    pub eval_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 120,
            base_lr: 1e-3,
            milestones: vec![60, 100],
            batch_size: 1,
            weight_decay: 1e-6,
            seed: 0,
            gradcheck_mode: false,
            decay_exclude_norms_and_biases: false,
            eval_threshold: 0.8,
        }
    }
}

impl TrainConfig {
    pub fn precision(&self) -> Precision {
        if self.gradcheck_mode {
            Precision::F64
        } else {
            Precision::F32
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.base_lr.is_nan() || self.base_lr <= 0.0 {
            return Err(Error::Config(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        if !(0.0..=1.0).contains(&self.eval_threshold) {
            return Err(Error::Config(format!(
                "threshold must be in [0,1], got {}",
                self.eval_threshold
            )));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "milestones must be strictly increasing, got {:?}",
                self.milestones
            )));
        }
        // с epochs = 0 the loop never runs, so unreachable milestones are allowed
        if self.epochs > 0 {
            if let Some(&m) = self.milestones.iter().find(|&&m| m >= self.epochs) {
                return Err(Error::Config(format!(
                    "milestone {m} is not below epochs {}",
                    self.epochs
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EpochEval {
    pub loss: f64,
    pub report: MetricsReport,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub steps: usize,
    /// Batch-mean BCE per optimizer step.
    pub step_losses: Vec<f64>,
    pub final_train: Option<EpochEval>,
    /// (epoch, dice) of the best validation epoch.
    pub best_val: Option<(usize, f64)>,
    pub params: TUnetParams,
}

fn csv_row(epoch: usize, split: &str, eval: &EpochEval) -> String {
    let r = &eval.report;
    format!(
        "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        epoch, split, eval.loss, r.miou, r.dice, r.pixel_acc, r.precision, r.recall
    )
}

/// One forward pass per sample: mean BCE plus pooled confusion counts.
pub fn eval_split(
    cfg: &ModelConfig,
    params: &TUnetParams,
    split: &[Sample],
    threshold: f64,
    precision: Precision,
) -> Result<EpochEval> {
    if split.is_empty() {
        return Err(Error::Contract("eval_split: empty split".into()));
    }
    let mut counts = ConfusionCounts::default();
    let mut loss_sum = 0.0;
    for sample in split {
        let prob = crate::model::forward_inference(cfg, params, &sample.image, precision)?;
        loss_sum += bce_loss_value(&prob, &sample.mask)?;
        counts.merge(&confusion(&binarize(&prob, threshold)?, &sample.mask)?);
    }
    Ok(EpochEval {
        loss: loss_sum / split.len() as f64,
        report: compute_metrics(&counts)?,
    })
}

/// Train on `train_set`, evaluating both splits after every epoch. Writes
/// `metrics.csv`, `last.ckpt` and `best.ckpt` into `out_dir`; an empty
/// `val_set` skips the val rows and makes `best.ckpt` the final parameters.
pub fn train(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    out_dir: impl AsRef<Path>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    tcfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("train: dataset is empty".into()));
    }
    for (i, s) in train_set.iter().chain(val_set.iter()).enumerate() {
        if s.image.shape() != [cfg.channels, cfg.height, cfg.width] {
            return Err(Error::Config(format!(
                "sample {i} has image shape {:?}, config expects [{}, {}, {}]",
                s.image.shape(),
                cfg.channels,
                cfg.height,
                cfg.width
            )));
        }
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let precision = tcfg.precision();
    let dtype = match precision {
        Precision::F64 => Dtype::F64,
        Precision::F32 => Dtype::F32,
    };
    let mut params = init_params(cfg)?;
    if precision == Precision::F32 {
        params.round_to_f32();
    }
    let mut opt = AdamWState::new(
        &params,
        AdamWConfig {
            weight_decay: tcfg.weight_decay,
            decay_exclude_norms_and_biases: tcfg.decay_exclude_norms_and_biases,
            ..Default::default()
        },
    );

    let metrics_path = out_dir.join(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut csv = BufWriter::new(file);
    writeln!(csv, "{CSV_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;

    let mut shuffle_rng = rng::seeded(tcfg.seed, rng::STREAM_SHUFFLE);
    let mut step_losses = Vec::new();
    let mut final_train: Option<EpochEval> = None;
    let mut best: Option<(usize, f64, TUnetParams)> = None;

    for epoch in 0..tcfg.epochs {
        let lr = lr_at(epoch, tcfg.epochs, tcfg.base_lr, &tcfg.milestones)?;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        rng::shuffle(&mut shuffle_rng, &mut order);

        for (batch_idx, batch) in order.chunks(tcfg.batch_size).enumerate() {
            params.zero_grads();
            let mut batch_loss = 0.0;
            for &si in batch {
                let sample = &train_set[si];
                let mut tape = Tape::new(precision);
                let vars = bind(&mut tape, &params, true);
                let img = tape.constant(&sample.image);
                let tgt = tape.constant(&sample.mask);
                let prob = forward(&mut tape, &vars, cfg, img)?;
                let loss = tape.bce_loss(prob, tgt)?;
                tape.backward(loss)?;
                harvest_grads(&tape, &vars, &mut params)?;
                batch_loss += tape.data(loss)[0];
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            let inv = 1.0 / batch.len() as f64;
            for (_, t) in params.named_tensors_mut() {
                for g in t.grad_mut() {
                    *g *= inv;
                }
            }
            opt.step(&mut params, lr, precision)?;
            step_losses.push(batch_loss);
        }

        let train_eval = eval_split(cfg, &params, train_set, tcfg.eval_threshold, precision)?;
        writeln!(csv, "{}", csv_row(epoch, "train", &train_eval))
            .map_err(|e| Error::io(&metrics_path, e))?;
        if !val_set.is_empty() {
            let val_eval = eval_split(cfg, &params, val_set, tcfg.eval_threshold, precision)?;
            writeln!(csv, "{}", csv_row(epoch, "val", &val_eval))
                .map_err(|e| Error::io(&metrics_path, e))?;
            let dice = val_eval.report.dice;
            if best.as_ref().is_none_or(|(_, d, _)| dice > *d) {
                best = Some((epoch, dice, params.clone()));
            }
        }
        final_train = Some(train_eval);
    }
    csv.flush().map_err(|e| Error::io(&metrics_path, e))?;
    drop(csv);

    save_checkpoint(out_dir.join(LAST_CHECKPOINT), cfg, &params, dtype)?;
    let best_val = best.as_ref().map(|(e, d, _)| (*e, *d));
    let best_params = best.map(|(_, _, p)| p).unwrap_or_else(|| params.clone());
    save_checkpoint(out_dir.join(BEST_CHECKPOINT), cfg, &best_params, dtype)?;

    Ok(TrainSummary {
        steps: step_losses.len(),
        step_losses,
        final_train,
        best_val,
        params,
    })
}
