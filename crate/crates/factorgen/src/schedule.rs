//! Time-varying training quantities: the linear ramps on the
//! mutual-information and adversarial weights, the labeled-draw probability
//! decay, and the Adam update.

use crate::error::{Error, Result};
use crate::nn::{NetGrads, Scalar, SequentialNet};
use serde::{Deserialize, Serialize};

/// Linear ramp: `start + (end-start) * min(iter/ramp_iters, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampSchedule {
    pub start: f64,
    pub end: f64,
    pub ramp_iters: u64,
}

impl RampSchedule {
    pub fn value(&self, iter: u64) -> f64 {
        if self.ramp_iters == 0 || iter >= self.ramp_iters {
            return self.end;
        }
        let frac = iter as f64 / self.ramp_iters as f64;
        self.start + (self.end - self.start) * frac
    }
}

/// Ramp and training lengths per dataset preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulePreset {
    pub ramp_iters: u64,
    pub train_iters: u64,
}

impl SchedulePreset {
    pub fn mnist() -> Self {
        SchedulePreset {
            ramp_iters: 1000,
            train_iters: 50_000,
        }
    }

    pub fn svhn() -> Self {
        SchedulePreset {
            ramp_iters: 10_000,
            train_iters: 150_000,
        }
    }

    pub fn celeba() -> Self {
        SchedulePreset {
            ramp_iters: 10_000,
            train_iters: 300_000,
        }
    }

    /// Desk-scale preset for the procedural shapes dataset.
    pub fn shapes() -> Self {
        SchedulePreset {
            ramp_iters: 1000,
            train_iters: 3000,
        }
    }
}

/// Which ramped weight is being queried. Both share the same 0-to-1 ramp.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RampedWeight {
    Info,
    Adv,
}

/// The mutual-information / adversarial weight multiplier at `iter`:
/// 0 at the start, 1 after `ramp_iters`.
pub fn lambda_at(iter: u64, _which: RampedWeight, preset: &SchedulePreset) -> f64 {
    RampSchedule {
        start: 0.0,
        end: 1.0,
        ramp_iters: preset.ramp_iters,
    }
    .value(iter)
}

/// Probability of drawing a labeled sample at `iter`: 1 at the start,
/// decaying linearly to the true labeled ratio over the ramp.
pub fn labeled_prob_at(iter: u64, labeled_ratio: f64, preset: &SchedulePreset) -> Result<f64> {
    if !(0.0..=1.0).contains(&labeled_ratio) || labeled_ratio == 0.0 {
        return Err(Error::invalid(format!(
            "labeled ratio {labeled_ratio} must be in (0, 1]"
        )));
    }
    Ok(RampSchedule {
        start: 1.0,
        end: labeled_ratio,
        ramp_iters: preset.ramp_iters,
    }
    .value(iter))
}

/// Optimizer hyperparameters. The discriminator trains at 1e-4, the
/// generator and encoder at 3e-4, all with Adam(0.5, 0.999).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub lr_d: f64,
    pub lr_ge: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            lr_d: 1e-4,
            lr_ge: 3e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 64,
        }
    }
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lr_d <= 0.0 || self.lr_ge <= 0.0 {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must be in (0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

/// First/second moment estimates for one network, aligned with its
/// parameter visitation order.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub t: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn zeros(sizes: &[usize]) -> Self {
        AdamState {
            m: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            t: 0,
        }
    }

    pub fn for_net(net: &SequentialNet<F>) -> Self {
        Self::zeros(&net.param_sizes())
    }
}

/// One bias-corrected Adam update on a flat parameter slice.
pub fn adam_step_slice<F: Scalar>(
    params: &mut [F],
    grads: &[F],
    m: &mut [F],
    v: &mut [F],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    debug_assert!(t >= 1);
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::numeric("non-finite gradient in optimizer step"));
    }
    let c1 = F::from_f64(1.0 / (1.0 - beta1.powi(t as i32)));
    let c2 = F::from_f64(1.0 / (1.0 - beta2.powi(t as i32)));
    let b1 = F::from_f64(beta1);
    let b2 = F::from_f64(beta2);
    let one_b1 = F::one() - b1;
    let one_b2 = F::one() - b2;
    let lr = F::from_f64(lr);
    let eps = F::from_f64(eps);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + one_b1 * g;
        v[i] = b2 * v[i] + one_b2 * g * g;
        let m_hat = m[i] * c1;
        let v_hat = v[i] * c2;
        params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Applies one Adam step to every parameter of a network. Increments the
/// state's step counter.
pub fn adam_step_net<F: Scalar>(
    net: &mut SequentialNet<F>,
    grads: &NetGrads<F>,
    state: &mut AdamState<F>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    state.t += 1;
    let t = state.t;
    let grad_slices = grads.slices();
    let mut idx = 0;
    let mut result = Ok(());
    let m = &mut state.m;
    let v = &mut state.v;
    net.for_each_param_mut(&mut |p| {
        if result.is_err() {
            return;
        }
        result = adam_step_slice(
            p,
            grad_slices[idx],
            &mut m[idx],
            &mut v[idx],
            t,
            lr,
            beta1,
            beta2,
            eps,
        );
        idx += 1;
    });
    result
}
