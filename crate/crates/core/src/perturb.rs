//! Projected gradient ascent on embedding perturbations.
//!
//! Each example owns an ε-ball: both the step normalization and the
//! projection use the Frobenius norm of that example's `[L, D]` slice.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph};
use crate::error::{Error, Result};
use crate::model::{Params, TokenBatch};
use crate::objectives::{cross_entropy, symmetric_kl};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbConfig {
    /// Variance of the initial Gaussian noise.
    pub sigma2: f64,
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            sigma2: 1e-4,
            epsilon: 5e-2,
            step_size: 5e-2,
            iterations: 1,
        }
    }
}

impl PerturbConfig {
    /// Checked constructor; `iterations` is signed so a negative count can be
    /// reported instead of wrapping.
    pub fn new(sigma2: f64, epsilon: f64, step_size: f64, iterations: i64) -> Result<Self> {
        let iterations = usize::try_from(iterations).map_err(|_| {
            Error::InvalidConfig(format!("iteration count must be >= 0, got {iterations}"))
        })?;
        let cfg = Self {
            sigma2,
            epsilon,
            step_size,
            iterations,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 >= 0.0) {
            return Err(Error::InvalidConfig("sigma2 must be >= 0".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be > 0".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::InvalidConfig("step size must be > 0".into()));
        }
        Ok(())
    }
}

/// Gaussian noise of variance `sigma2` with padding positions zeroed.
///
/// `shape` is `[N, L, D]` and `mask` has `N·L` entries.
pub fn init_noise<S: Scalar>(
    shape: &[usize],
    mask: &[bool],
    sigma2: f64,
    rng: &mut impl Rng,
) -> Result<Tensor<S>> {
    if !(sigma2 >= 0.0) {
        return Err(Error::InvalidConfig("sigma2 must be >= 0".into()));
    }
    let [n, l, d] = shape else {
        return Err(Error::Shape(format!("noise shape must be [N, L, D], got {shape:?}")));
    };
    if mask.len() != n * l {
        return Err(Error::Shape(format!(
            "mask has {} entries, expected {}",
            mask.len(),
            n * l
        )));
    }
    if sigma2 == 0.0 {
        return Ok(Tensor::zeros(shape));
    }
    let normal = Normal::new(0.0, sigma2.sqrt()).expect("positive std");
    let mut data = vec![S::zero(); n * l * d];
    for (pos, chunk) in data.chunks_exact_mut(*d).enumerate() {
        if mask[pos] {
            for v in chunk {
                *v = S::lit(normal.sample(rng));
            }
        }
    }
    Tensor::new(shape.to_vec(), data)
}

fn norm<S: Scalar>(x: &[S]) -> S {
    x.iter().map(|&v| v * v).sum::<S>().sqrt()
}

fn project_slice<S: Scalar>(x: &mut [S], epsilon: S) {
    let n = norm(x);
    if n <= epsilon {
        return;
    }
    let mut scale = epsilon / n;
    loop {
        let scaled: Vec<S> = x.iter().map(|&v| v * scale).collect();
        if norm(&scaled) <= epsilon {
            x.copy_from_slice(&scaled);
            return;
        }
        // rounding pushed the rescaled norm a hair above the bound
        scale *= S::one() - S::epsilon() * S::lit(4.0);
    }
}

/// Radially rescales `delta` onto the Frobenius ball of radius `epsilon` when
/// it lies outside; otherwise returns it unchanged.
pub fn project_eps_ball<S: Scalar>(delta: &Tensor<S>, epsilon: S) -> Tensor<S> {
    let mut out = delta.clone();
    project_slice(out.data_mut(), epsilon);
    out
}

/// What the inner loop ascends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AscentTarget<'a> {
    /// Domain cross-entropy against these domain ids.
    Domain(&'a [usize]),
    /// Task cross-entropy against these labels.
    Task(&'a [usize]),
    /// Symmetric KL between perturbed and clean task predictions.
    Virtual,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PerturbDiagnostics {
    /// Examples whose gradient norm was zero, summed over iterations.
    pub zero_grad_skips: usize,
    /// Loss at the initial noise.
    pub initial_loss: f64,
    /// Loss at the returned perturbation.
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Crafted<S> {
    pub delta: Tensor<S>,
    pub diagnostics: PerturbDiagnostics,
}

/// Perturbation that maximizes the domain classifier's loss.
pub fn craft_domain_puzzle<S: Scalar>(
    params: &Params<S>,
    batch: &TokenBatch,
    cfg: &PerturbConfig,
    rng: &mut impl Rng,
) -> Result<Crafted<S>> {
    let d = batch.domain_ids();
    craft(params, batch, AscentTarget::Domain(&d), cfg, rng)
}

/// `K` steps of `δ ← Π_ε(δ + η·g/‖g‖)` from Gaussian initial noise, where `g`
/// is the gradient of the target loss with respect to `δ`. Parameters are
/// held constant throughout.
pub fn craft<S: Scalar>(
    params: &Params<S>,
    batch: &TokenBatch,
    target: AscentTarget<'_>,
    cfg: &PerturbConfig,
    rng: &mut impl Rng,
) -> Result<Crafted<S>> {
    cfg.validate()?;
    params.check_batch(batch)?;
    let c = params.config();
    let shape = [batch.size, batch.seq_len, c.embed_dim];
    let init = init_noise::<S>(&shape, &batch.mask, cfg.sigma2, rng)?;
    let epsilon = S::lit(cfg.epsilon);
    let step = S::lit(cfg.step_size);
    let per_example = batch.seq_len * c.embed_dim;

    let mut g = Graph::new();
    let m = params.constants(&mut g);
    let e = m.embed(&mut g, batch);
    let delta_var = g.leaf("delta", &shape);
    let hp = m.encode(&mut g, e, Some(delta_var), batch);
    let loss = match target {
        AscentTarget::Domain(ids) => {
            let logits = m.domain_logits(&mut g, hp);
            cross_entropy(&mut g, logits, ids, crate::model::NUM_DOMAINS)?
        }
        AscentTarget::Task(labels) => {
            let logits = m.task_logits(&mut g, hp);
            cross_entropy(&mut g, logits, labels, c.num_classes)?
        }
        AscentTarget::Virtual => {
            let h = m.encode(&mut g, e, None, batch);
            let clean = m.task_logits(&mut g, h);
            let pert = m.task_logits(&mut g, hp);
            symmetric_kl(&mut g, pert, clean)
        }
    };

    let mut delta = project_eps_ball_per_example(init, per_example, epsilon);
    let mut bindings = Bindings::new();
    bindings.bind(delta_var, delta.clone());
    g.evaluate(&bindings)?;
    let mut diagnostics = PerturbDiagnostics {
        initial_loss: g.scalar(loss).expect("scalar loss").as_f64(),
        ..Default::default()
    };

    for it in 0..cfg.iterations {
        if it > 0 {
            bindings.bind(delta_var, delta.clone());
            g.evaluate(&bindings)?;
        }
        let mut grads = g.backward(loss)?;
        let grad = grads.take(delta_var).expect("delta gradient");
        for (dx, gx) in delta
            .data_mut()
            .chunks_exact_mut(per_example)
            .zip(grad.data().chunks_exact(per_example))
        {
            let gn = norm(gx);
            if gn == S::zero() || !gn.is_finite() {
                diagnostics.zero_grad_skips += 1;
                continue;
            }
            let k = step / gn;
            for (a, &b) in dx.iter_mut().zip(gx) {
                *a += k * b;
            }
            project_slice(dx, epsilon);
            debug_assert!(norm(dx) <= epsilon);
        }
    }
    if cfg.iterations == 0 {
        diagnostics.final_loss = diagnostics.initial_loss;
    } else {
        bindings.bind(delta_var, delta.clone());
        g.evaluate(&bindings)?;
        diagnostics.final_loss = g.scalar(loss).expect("scalar loss").as_f64();
    }
    Ok(Crafted { delta, diagnostics })
}

fn project_eps_ball_per_example<S: Scalar>(
    mut delta: Tensor<S>,
    per_example: usize,
    epsilon: S,
) -> Tensor<S> {
    for chunk in delta.data_mut().chunks_exact_mut(per_example) {
        project_slice(chunk, epsilon);
    }
    delta
}

/// Largest per-example Frobenius norm of a `[N, L, D]` perturbation.
pub fn max_example_norm<S: Scalar>(delta: &Tensor<S>) -> S {
    let per = delta.shape()[1..].iter().product::<usize>().max(1);
    delta
        .data()
        .chunks_exact(per)
        .map(norm)
        .fold(S::zero(), S::max)
}
