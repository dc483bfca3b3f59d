//! BCE loss entry point and the AdamW optimizer with decoupled weight decay.

use crate::error::{Error, Result};
use crate::model::TUnetParams;
use crate::tape::{Precision, Tape, Var};
use crate::tensor::Tensor;

/// Mean binary cross-entropy over all pixels, recorded on the tape so it is
/// differentiable w.r.t. the prediction. Probabilities are clamped to
/// `[1e-7, 1−1e-7]`; the target mask must be binary.
pub fn bce_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    tape.bce_loss(pred, target)
}

/// BCE of two plain tensors (no gradients), for evaluation passes.
pub fn bce_loss_value(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let mut tape = Tape::new(Precision::F64);
    let p = tape.constant(pred);
    let t = tape.constant(target);
    let l = tape.bce_loss(p, t)?;
    Ok(tape.data(l)[0])
}

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// When set, 1-D tensors (biases, LN gains/shifts) are exempt from decay.
    pub decay_exclude_norms_and_biases: bool,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
            decay_exclude_norms_and_biases: false,
        }
    }
}

struct Moment {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-parameter first/second moments plus the shared step counter.
pub struct AdamWState {
    cfg: AdamWConfig,
    t: u64,
    names: Vec<String>,
    moments: Vec<Moment>,
}

impl AdamWState {
    pub fn new(params: &TUnetParams, cfg: AdamWConfig) -> Self {
        let named = params.named_tensors();
        let names = named.iter().map(|(n, _)| n.clone()).collect();
        let moments = named
            .iter()
            .map(|(_, t)| Moment {
                m: vec![0.0; t.numel()],
                v: vec![0.0; t.numel()],
            })
            .collect();
        AdamWState {
            cfg,
            t: 0,
            names,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One optimizer step over every parameter, reading each tensor's
    /// accumulated gradient (missing gradients count as zero). In `F32` mode
    /// parameters and moments are rounded through f32 after the update.
    pub fn step(&mut self, params: &mut TUnetParams, lr: f64, precision: Precision) -> Result<()> {
        self.t += 1;
        let t = self.t;
        let named = params.named_tensors_mut();
        if named.len() != self.moments.len() {
            return Err(Error::Dim(
                "optimizer state does not match parameter set".into(),
            ));
        }
        for (i, (name, tensor)) in named.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(Error::Dim(format!(
                    "optimizer state mismatch: expected '{}', got '{name}'",
                    self.names[i]
                )));
            }
            let decay = if self.cfg.decay_exclude_norms_and_biases && tensor.shape().len() == 1 {
                0.0
            } else {
                self.cfg.weight_decay
            };
            let zero;
            let grad: &[f64] = match tensor.grad() {
                Some(g) => {
                    // borrow ends before data_mut below
                    zero = g.to_vec();
                    &zero
                }
                None => {
                    zero = vec![0.0; tensor.numel()];
                    &zero
                }
            };
            let mom = &mut self.moments[i];
            adamw_update(
                tensor.data_mut(),
                grad,
                &mut mom.m,
                &mut mom.v,
                t,
                lr,
                self.cfg.beta1,
                self.cfg.beta2,
                self.cfg.eps,
                decay,
            );
            if precision == Precision::F32 {
                tensor.round_to_f32();
                for v in mom.m.iter_mut().chain(mom.v.iter_mut()) {
                    *v = *v as f32 as f64;
                }
            }
        }
        Ok(())
    }
}

/// The AdamW recurrence on one flat parameter array:
/// m←β₁m+(1−β₁)g, v←β₂v+(1−β₂)g², bias-corrected m̂/v̂,
/// θ←θ−lr·(m̂/(√v̂+ε)+λθ) with decay decoupled from the gradient path.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) {
    debug_assert!(t >= 1);
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * theta[i]);
    }
}

/// Staged learning rate: the base rate halved once per milestone already
/// passed (`epoch ≥ milestone`).
pub fn lr_at(epoch: usize, epochs: usize, base_lr: f64, milestones: &[usize]) -> Result<f64> {
    if epoch >= epochs {
        return Err(Error::Contract(format!(
            "epoch {epoch} out of range (epochs = {epochs})"
        )));
    }
    let passed = milestones.iter().filter(|&&m| epoch >= m).count();
    Ok(base_lr * 0.5f64.powi(passed as i32))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_reference_values() {
        let ms = [60usize, 100];
        assert_eq!(lr_at(0, 120, 1e-3, &ms).unwrap(), 1e-3);
        assert_eq!(lr_at(59, 120, 1e-3, &ms).unwrap(), 1e-3);
        assert_eq!(lr_at(60, 120, 1e-3, &ms).unwrap(), 5e-4);
        assert_eq!(lr_at(99, 120, 1e-3, &ms).unwrap(), 5e-4);
        assert_eq!(lr_at(100, 120, 1e-3, &ms).unwrap(), 2.5e-4);
        assert_eq!(lr_at(110, 120, 1e-3, &ms).unwrap(), 2.5e-4);
        assert!(lr_at(120, 120, 1e-3, &ms).is_err());
    }

    #[test]
    fn lr_is_non_increasing_with_expected_level_count() {
        let ms = [10usize, 20, 30];
        let mut seen = std::collections::BTreeSet::new();
        let mut prev = f64::INFINITY;
        for e in 0..40 {
            let lr = lr_at(e, 40, 1e-3, &ms).unwrap();
            assert!(lr <= prev);
            prev = lr;
            seen.insert(format!("{lr:.12e}"));
        }
        assert_eq!(seen.len(), ms.len() + 1);
    }

    #[test]
    fn zero_grad_isolates_decoupled_decay() {
        let mut theta = vec![2.0, -3.0];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        let (lr, wd) = (0.01, 0.1);
        adamw_update(&mut theta, &[0.0, 0.0], &mut m, &mut v, 1, lr, 0.9, 0.999, 1e-8, wd);
        assert_eq!(theta[0], 2.0 * (1.0 - lr * wd));
        assert_eq!(theta[1], -3.0 * (1.0 - lr * wd));
    }

    #[test]
    fn first_step_bias_correction() {
        let mut theta = vec![0.0];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        let lr = 1e-3;
        adamw_update(&mut theta, &[1.0], &mut m, &mut v, 1, lr, 0.9, 0.999, 1e-8, 0.0);
        // m̂ = 1, v̂ = 1 after bias correction, so the update is −lr/(1+ε)
        assert!((theta[0] + lr / (1.0 + 1e-8)).abs() < 1e-18);
        assert!((theta[0] + lr).abs() < 1e-9);
    }

    #[test]
    fn three_step_hand_recurrence() {
        // Independent scalar recurrence for g = [1, −1, 2], λ = 0.
        let (beta1, beta2, eps, lr) = (0.9, 0.999, 1e-8, 0.05);
        let gs = [1.0, -1.0, 2.0];
        let (mut m_ref, mut v_ref, mut theta_ref) = (0.0f64, 0.0f64, 0.3f64);
        let mut theta = vec![0.3];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        for (step, &g) in gs.iter().enumerate() {
            let t = (step + 1) as u64;
            m_ref = beta1 * m_ref + (1.0 - beta1) * g;
            v_ref = beta2 * v_ref + (1.0 - beta2) * g * g;
            let mh = m_ref / (1.0 - beta1.powi(t as i32));
            let vh = v_ref / (1.0 - beta2.powi(t as i32));
            theta_ref -= lr * mh / (vh.sqrt() + eps);
            adamw_update(&mut theta, &[g], &mut m, &mut v, t, lr, beta1, beta2, eps, 0.0);
            assert!(
                (theta[0] - theta_ref).abs() <= 1e-12,
                "step {t}: {} vs {theta_ref}",
                theta[0]
            );
        }
    }

    #[test]
    fn five_step_lambda_zero_reduces_to_adam() {
        let (beta1, beta2, eps, lr) = (0.9, 0.999, 1e-8, 0.01);
        let gs = [0.5, -0.25, 1.5, -2.0, 0.1];
        let (mut m_ref, mut v_ref, mut theta_ref) = (0.0f64, 0.0f64, -1.2f64);
        let mut theta = vec![-1.2];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        for (step, &g) in gs.iter().enumerate() {
            let t = (step + 1) as u64;
            m_ref = beta1 * m_ref + (1.0 - beta1) * g;
            v_ref = beta2 * v_ref + (1.0 - beta2) * g * g;
            let mh = m_ref / (1.0 - beta1.powi(t as i32));
            let vh = v_ref / (1.0 - beta2.powi(t as i32));
            theta_ref -= lr * mh / (vh.sqrt() + eps);
            adamw_update(&mut theta, &[g], &mut m, &mut v, t, lr, beta1, beta2, eps, 0.0);
        }
        assert!((theta[0] - theta_ref).abs() <= 1e-12);
    }

    #[test]
    fn state_step_applies_decay_to_all_tensors_by_default() {
        use crate::config::ModelConfig;
        use crate::model::init_params;
        let cfg = ModelConfig::tiny();
        let mut params = init_params(&cfg).unwrap();
        let before: Vec<f64> = params.blocks[0].ln1_gamma.data().to_vec();
        let mut state = AdamWState::new(
            &params,
            AdamWConfig {
                weight_decay: 0.5,
                ..Default::default()
            },
        );
        state.step(&mut params, 0.1, Precision::F64).unwrap();
        // zero grads everywhere → pure decay: γ ← γ·(1 − 0.1·0.5)
        for (a, b) in params.blocks[0].ln1_gamma.data().iter().zip(&before) {
            assert!((a - b * 0.95).abs() < 1e-15);
        }

        // with the exclusion switch, 1-D tensors are untouched
        let mut params = init_params(&cfg).unwrap();
        let before: Vec<f64> = params.blocks[0].ln1_gamma.data().to_vec();
        let mut state = AdamWState::new(
            &params,
            AdamWConfig {
                weight_decay: 0.5,
                decay_exclude_norms_and_biases: true,
                ..Default::default()
            },
        );
        state.step(&mut params, 0.1, Precision::F64).unwrap();
        assert_eq!(params.blocks[0].ln1_gamma.data(), &before[..]);
    }
}
