//! Finite-difference verification of the full-model gradient.
//!
//! The oracle is independent of the backward pass: it evaluates the loss
//! twice per sampled coordinate (central differences, 64-bit) and compares
//! against the analytic gradient from one backward sweep.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{bind, forward, init_params, random_image, TUnetParams};
use crate::rng;
use crate::synth::Sample;
use crate::tape::{Precision, Tape};
use crate::tensor::Tensor;

/// End-to-end relative error tolerance.
pub const GRADCHECK_TOL: f64 = 1e-3;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub sampled: usize,
    pub worst_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst_rel_err <= self.tolerance
    }
}

/// Relative error with a both-near-zero guard.
pub fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs());
    if denom < 1e-8 {
        0.0
    } else {
        (a - n).abs() / denom
    }
}

fn loss_of(cfg: &ModelConfig, params: &TUnetParams, image: &Tensor, mask: &Tensor) -> Result<f64> {
    let mut tape = Tape::new(Precision::F64);
    let vars = bind(&mut tape, params, false);
    let img = tape.constant(image);
    let tgt = tape.constant(mask);
    let prob = forward(&mut tape, &vars, cfg, img)?;
    let loss = tape.bce_loss(prob, tgt)?;
    Ok(tape.data(loss)[0])
}

/// Sample `samples` parameter coordinates uniformly and compare analytic
/// gradients of the full TUnet BCE loss against central differences.
/// `corrupt` deliberately biases the analytic gradients (negative control).
pub fn gradcheck_model(cfg: &ModelConfig, samples: usize, corrupt: bool) -> Result<GradCheckReport> {
    if samples == 0 {
        return Err(Error::Config("gradcheck: samples must be ≥ 1".into()));
    }
    cfg.validate()?;
    let mut params = init_params(cfg)?;
    let mut r = rng::seeded(cfg.seed, rng::STREAM_GRADCHECK);

    // deterministic fixture: random image, random binary mask
    let image = random_image(cfg, &mut r);
    let mask_data: Vec<f64> = (0..cfg.height * cfg.width)
        .map(|_| if rng::uniform01(&mut r) < 0.3 { 1.0 } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(vec![1, cfg.height, cfg.width], mask_data)?;

    // analytic gradients from one backward sweep
    let mut tape = Tape::new(Precision::F64);
    let vars = bind(&mut tape, &params, true);
    let img = tape.constant(&image);
    let tgt = tape.constant(&mask);
    let prob = forward(&mut tape, &vars, cfg, img)?;
    let loss = tape.bce_loss(prob, tgt)?;
    tape.backward(loss)?;

    let names: Vec<String> = params.named_tensors().iter().map(|(n, _)| n.clone()).collect();
    let mut analytic: Vec<Vec<f64>> = Vec::with_capacity(names.len());
    for (&var, (_, tensor)) in vars.ordered().iter().zip(params.named_tensors().iter()) {
        let g = match tape.grad(var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tensor.numel()],
        };
        analytic.push(g);
    }
    if corrupt {
        for g in &mut analytic {
            for v in g.iter_mut() {
                *v = 1.5 * *v + 0.01;
            }
        }
    }
    drop(tape);

    // flat coordinate space over all parameters
    let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.numel()).collect();
    let total: usize = sizes.iter().sum();

    let mut worst = GradCheckReport {
        sampled: samples,
        worst_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        tolerance: GRADCHECK_TOL,
    };
    for _ in 0..samples {
        let flat = rng::index(&mut r, total);
        let (mut ti, mut ei) = (0usize, flat);
        while ei >= sizes[ti] {
            ei -= sizes[ti];
            ti += 1;
        }
        let original = {
            let named = params.named_tensors();
            named[ti].1.data()[ei]
        };
        set_coord(&mut params, ti, ei, original + FD_STEP);
        let loss_plus = loss_of(cfg, &params, &image, &mask)?;
        set_coord(&mut params, ti, ei, original - FD_STEP);
        let loss_minus = loss_of(cfg, &params, &image, &mask)?;
        set_coord(&mut params, ti, ei, original);

        let numeric = (loss_plus - loss_minus) / (2.0 * FD_STEP);
        let err = rel_err(analytic[ti][ei], numeric);
        if err > worst.worst_rel_err {
            worst.worst_rel_err = err;
            worst.worst_param = names[ti].clone();
            worst.worst_index = ei;
        }
    }
    Ok(worst)
}

fn set_coord(params: &mut TUnetParams, tensor_idx: usize, elem_idx: usize, value: f64) {
    let mut named = params.named_tensors_mut();
    named[tensor_idx].1.data_mut()[elem_idx] = value;
}

/// BCE-only gradient check against central differences (used by the loss
/// acceptance criterion at a tighter tolerance than the full model).
pub fn bce_grad_vs_fd(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let mut tape = Tape::new(Precision::F64);
    let p = tape.leaf(pred.shape().to_vec(), pred.data().to_vec(), true)?;
    let t = tape.constant(target);
    let loss = tape.bce_loss(p, t)?;
    tape.backward(loss)?;
    let analytic = tape.grad(p).expect("pred requires grad").to_vec();

    let mut worst = 0.0f64;
    let eval = |data: &[f64]| -> Result<f64> {
        let mut tape = Tape::new(Precision::F64);
        let p = tape.leaf(pred.shape().to_vec(), data.to_vec(), false)?;
        let t = tape.constant(target);
        let l = tape.bce_loss(p, t)?;
        Ok(tape.data(l)[0])
    };
    let mut data = pred.data().to_vec();
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + FD_STEP;
        let lp = eval(&data)?;
        data[i] = orig - FD_STEP;
        let lm = eval(&data)?;
        data[i] = orig;
        let numeric = (lp - lm) / (2.0 * FD_STEP);
        worst = worst.max((analytic[i] - numeric).abs());
    }
    Ok(worst)
}

/// Shared fixture: the dataset of `samples_for(cfg)` the verification and
/// overfit experiments run on.
pub fn fixture_samples(cfg: &ModelConfig, count: usize) -> Result<Vec<Sample>> {
    crate::synth::synth_dataset(cfg.seed, count, cfg.height, cfg.width)
}
