//! Adam with decoupled weight decay, two learning-rate groups.

use std::collections::BTreeMap;

use crate::encoder::{Model, ParamKind};
use crate::numerics::Scalar;

use super::TrainingError;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

struct Moments<S> {
    m: Vec<S>,
    v: Vec<S>,
}

/// First/second moment buffers per trainable parameter plus the shared step
/// counter.
pub struct OptimizerState<S> {
    moments: BTreeMap<String, Moments<S>>,
    step: u64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new() -> Self {
        OptimizerState {
            moments: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

impl<S: Scalar> Default for OptimizerState<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// One AdamW update. `grads` holds gradients for the trainable parameters
/// only (missing entries are frozen and stay untouched). Decay is decoupled
/// (`p -= lr * wd * p`), applied before the moment-based update and skipped
/// for biases and layer-norm parameters. The classification head uses
/// `lr_head`, everything else `lr_rest`; both arrive pre-scaled by the
/// schedule factor.
pub fn adamw_step<S: Scalar>(
    model: &mut Model<S>,
    grads: &BTreeMap<String, Vec<S>>,
    state: &mut OptimizerState<S>,
    lr_head: f64,
    lr_rest: f64,
    weight_decay: f64,
) -> Result<(), TrainingError> {
    state.step += 1;
    let t = state.step as i32;
    let bias_corr1 = 1.0 - ADAM_BETA1.powi(t);
    let bias_corr2 = 1.0 - ADAM_BETA2.powi(t);
    let beta1 = S::from_f64(ADAM_BETA1);
    let beta2 = S::from_f64(ADAM_BETA2);
    let one_minus_beta1 = S::from_f64(1.0 - ADAM_BETA1);
    let one_minus_beta2 = S::from_f64(1.0 - ADAM_BETA2);
    let eps = S::from_f64(ADAM_EPS);
    let inv_corr1 = S::from_f64(1.0 / bias_corr1);
    let inv_corr2 = S::from_f64(1.0 / bias_corr2);

    for param in model.params_mut() {
        let Some(grad) = grads.get(&param.name) else {
            continue;
        };
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainingError::NonFiniteGrad(param.name.clone()));
        }
        let lr = if param.kind == ParamKind::Classifier {
            lr_head
        } else {
            lr_rest
        };
        let lr_s = S::from_f64(lr);
        let moments = state
            .moments
            .entry(param.name.clone())
            .or_insert_with(|| Moments {
                m: vec![S::zero(); param.data.len()],
                v: vec![S::zero(); param.data.len()],
            });

        let decay_factor = S::from_f64(1.0 - lr * weight_decay);
        for i in 0..param.data.len() {
            if param.decay && weight_decay > 0.0 {
                param.data[i] = param.data[i] * decay_factor;
            }
            let g = grad[i];
            moments.m[i] = beta1 * moments.m[i] + one_minus_beta1 * g;
            moments.v[i] = beta2 * moments.v[i] + one_minus_beta2 * g * g;
            let m_hat = moments.m[i] * inv_corr1;
            let v_hat = moments.v[i] * inv_corr2;
            param.data[i] = param.data[i] - lr_s * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
