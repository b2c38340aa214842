//! Adam with decoupled weight decay, and the warmup/decay learning-rate schedule.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment accumulators plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &[Tensor<S>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Weight decay shrinks each parameter by
/// `lr · weight_decay · p` directly, independent of the gradient.
///
/// Nothing is modified when a gradient contains a non-finite value.
pub fn optimizer_step<S: Scalar>(
    params: &mut [Tensor<S>],
    grads: &[Tensor<S>],
    state: &mut AdamState<S>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape("parameter, gradient and state counts differ".into()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient {i}: expected {:?}, got {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient of parameter {i}"),
                step: state.step as usize,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::lit(BETA1), S::lit(BETA2));
    let c1 = S::one() - b1.powi(t);
    let c2 = S::one() - b2.powi(t);
    let lr = S::lit(lr);
    let decay = S::one() - lr * S::lit(weight_decay);
    let eps = S::lit(ADAM_EPS);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (S::one() - b1) * gi;
            *vi = b2 * *vi + (S::one() - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi = *pi * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Number of warmup steps for a run of `total_steps`.
pub fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> usize {
    (total_steps as f64 * warmup_fraction).round() as usize
}

/// Linear ramp from 0 to `peak` over the warmup window, then linear decay to
/// 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_fraction: f64, peak: f64) -> f64 {
    let warm = warmup_steps(total_steps, warmup_fraction);
    let step = step.min(total_steps);
    if step < warm {
        peak * step as f64 / warm as f64
    } else if total_steps == warm {
        peak
    } else {
        peak * (total_steps - step) as f64 / (total_steps - warm) as f64
    }
}
