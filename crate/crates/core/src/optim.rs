//! Adam with decoupled weight decay and a linear decay schedule.

use thiserror::Error;

use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OptimError {
    #[error("shape mismatch: {params} parameters, {grads} gradients, {moments} moments")]
    ShapeMismatch {
        params: usize,
        grads: usize,
        moments: usize,
    },
    #[error("adam step counter starts at 1")]
    ZeroStep,
}

/// `base_lr · (1 − step / total_steps)`, no warmup.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let step = step.min(total_steps);
    base_lr * (1.0 - step as f64 / total_steps as f64)
}

/// First and second moment estimates for one flat tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments<T> {
    pub first: Vec<T>,
    pub second: Vec<T>,
}

impl<T: Scalar> AdamMoments<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            first: vec![T::zero(); len],
            second: vec![T::zero(); len],
        }
    }

    pub fn reset(&mut self) {
        self.first.fill(T::zero());
        self.second.fill(T::zero());
    }
}

/// One AdamW update at step `t ≥ 1`: decay `θ ← θ − lr·wd·θ`, then the
/// bias-corrected Adam step.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    moments: &mut AdamMoments<T>,
    lr: f64,
    weight_decay: f64,
    t: usize,
) -> Result<(), OptimError> {
    if params.len() != grads.len() || params.len() != moments.first.len() || params.len() != moments.second.len() {
        return Err(OptimError::ShapeMismatch {
            params: params.len(),
            grads: grads.len(),
            moments: moments.first.len(),
        });
    }
    if t == 0 {
        return Err(OptimError::ZeroStep);
    }
    let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
    let one = T::one();
    let correct1 = one - b1.powi(t as i32);
    let correct2 = one - b2.powi(t as i32);
    let lr = T::lit(lr);
    let shrink = one - lr * T::lit(weight_decay);
    let eps = T::lit(ADAM_EPS);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(moments.first.iter_mut())
        .zip(moments.second.iter_mut())
    {
        *p = *p * shrink;
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / correct1;
        let v_hat = *v / correct2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
