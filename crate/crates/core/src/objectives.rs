//! Loss builders. Each function appends nodes to a [`Graph`] and returns the
//! scalar loss node; [`TotalLoss`] composes the full adaptation objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, Var};
use crate::corpus::Domain;
use crate::error::{Error, Result};
use crate::model::{ModelVars, TokenBatch};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor applied to probabilities before taking logs in every divergence.
pub const PROB_FLOOR: f64 = 1e-12;
/// Smallest bandwidth the median heuristic may return.
pub const BANDWIDTH_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha_adv: f64,
    pub alpha: f64,
    pub lambda_contrast: f64,
    pub beta: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_adv: 1.0,
            alpha: 1e-3,
            lambda_contrast: 3e-2,
            beta: 5.0,
            tau: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig("tau must be positive".into()));
        }
        for (name, w) in [
            ("alpha_adv", self.alpha_adv),
            ("alpha", self.alpha),
            ("lambda_contrast", self.lambda_contrast),
            ("beta", self.beta),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Second term of the domain loss: cross-entropy of the perturbed logits
/// against the domain label, or symmetric KL against the clean predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainLossVariant {
    #[default]
    Label,
    Match,
}

impl std::str::FromStr for DomainLossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "label" => Ok(Self::Label),
            "match" => Ok(Self::Match),
            other => Err(Error::InvalidConfig(format!(
                "unknown domain loss variant `{other}` (expected `label` or `match`)"
            ))),
        }
    }
}

/// Which auxiliary terms participate in the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Components {
    pub domain: bool,
    pub contrast: bool,
    pub consist: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self::ALL
    }
}

impl Components {
    pub const ALL: Self = Self {
        domain: true,
        contrast: true,
        consist: true,
    };
    pub const NONE: Self = Self {
        domain: false,
        contrast: false,
        consist: false,
    };

    pub fn any(&self) -> bool {
        self.domain || self.contrast || self.consist
    }
}

/// Mean cross-entropy of `[N, C]` logits against `labels`.
pub fn cross_entropy<S: Scalar>(
    g: &mut Graph<S>,
    logits: Var,
    labels: &[usize],
    num_classes: usize,
) -> Result<Var> {
    if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange { label, num_classes });
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("cross-entropy over an empty batch".into()));
    }
    let lp = g.log_softmax(logits);
    let picked = g.pick(lp, labels.to_vec());
    let m = g.mean(picked);
    Ok(g.scale(m, -S::one()))
}

pub fn task_loss<S: Scalar>(
    g: &mut Graph<S>,
    logits: Var,
    labels: &[usize],
    num_classes: usize,
) -> Result<Var> {
    cross_entropy(g, logits, labels, num_classes)
}

/// Per-row `½[KL(p‖q) + KL(q‖p)]` of softmaxed logits, shaped `[N]`.
fn sym_kl_rows<S: Scalar>(g: &mut Graph<S>, a: Var, b: Var) -> Var {
    let p = g.softmax(a);
    let q = g.softmax(b);
    let pf = g.clamp_min(p, S::lit(PROB_FLOOR));
    let qf = g.clamp_min(q, S::lit(PROB_FLOOR));
    let lp = g.log(pf);
    let lq = g.log(qf);
    // KL(p‖q) + KL(q‖p) = Σ (p − q)(log p − log q)
    let dp = g.sub(p, q);
    let dl = g.sub(lp, lq);
    let prod = g.mul(dp, dl);
    let rows = g.sum_last(prod);
    g.scale(rows, S::lit(0.5))
}

/// Batch mean of the symmetric KL between the softmaxes of two logit arrays.
pub fn symmetric_kl<S: Scalar>(g: &mut Graph<S>, a: Var, b: Var) -> Var {
    let rows = sym_kl_rows(g, a, b);
    g.mean(rows)
}

pub fn consistency_loss<S: Scalar>(g: &mut Graph<S>, clean: Var, perturbed: Var) -> Var {
    symmetric_kl(g, clean, perturbed)
}

pub fn domain_loss<S: Scalar>(
    g: &mut Graph<S>,
    clean: Var,
    perturbed: Var,
    domains: &[usize],
    alpha_adv: f64,
    variant: DomainLossVariant,
) -> Result<Var> {
    let base = cross_entropy(g, clean, domains, Domain::ALL.len())?;
    let second = match variant {
        DomainLossVariant::Label => cross_entropy(g, perturbed, domains, Domain::ALL.len())?,
        DomainLossVariant::Match => symmetric_kl(g, perturbed, clean),
    };
    let weighted = g.scale(second, S::lit(alpha_adv));
    Ok(g.add(base, weighted))
}

/// InfoNCE over cosine similarities where anchor `i`'s positive is `z'_i` and
/// its negatives are the other clean rows `z_k`, `k ≠ i`. The positive pair is
/// absent from the denominator, so the value can be negative.
pub fn contrastive_loss<S: Scalar>(
    g: &mut Graph<S>,
    z: Var,
    z_prime: Var,
    tau: f64,
    domains: &[Domain],
) -> Result<Var> {
    let n = domains.len();
    if n < 2 {
        return Err(Error::InvalidInput(
            "contrastive loss needs at least two rows".into(),
        ));
    }
    if domains.iter().any(|&d| d != domains[0]) {
        return Err(Error::MixedDomain);
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig("tau must be positive".into()));
    }
    let inv_tau = S::lit(1.0 / tau);
    let pos = g.cosine_rows(z, z_prime);
    let pos = g.scale(pos, inv_tau);
    let sim = g.cosine_pairwise(z, z);
    let sim = g.scale(sim, inv_tau);
    let e = g.exp(sim);
    let off_diag = g.constant(Tensor::from_fn(&[n, n], |k| {
        if k / n == k % n {
            S::zero()
        } else {
            S::one()
        }
    }));
    let e = g.mul(e, off_diag);
    let denom = g.sum_last(e);
    let log_denom = g.log(denom);
    let per_row = g.sub(log_denom, pos);
    Ok(g.mean(per_row))
}

/// Symmetric KL between softmaxes of the two batches' mean representations.
pub fn kl_matching_loss<S: Scalar>(g: &mut Graph<S>, hs: Var, ht: Var) -> Var {
    let ms = g.mean_rows(hs);
    let mt = g.mean_rows(ht);
    symmetric_kl(g, ms, mt)
}

/// Biased MMD² with kernel `exp(−‖a−b‖² / (2·bw²))`.
pub fn mmd_loss<S: Scalar>(g: &mut Graph<S>, hs: Var, ht: Var, bandwidth: f64) -> Var {
    let c = S::lit(-1.0 / (2.0 * bandwidth * bandwidth));
    let mut kernel_mean = |a: Var, b: Var| {
        let d = g.pairwise_sq_dist(a, b);
        let d = g.scale(d, c);
        let k = g.exp(d);
        g.mean(k)
    };
    let kss = kernel_mean(hs, hs);
    let ktt = kernel_mean(ht, ht);
    let kst = kernel_mean(hs, ht);
    let sum = g.add(kss, ktt);
    let cross = g.scale(kst, S::lit(2.0));
    g.sub(sum, cross)
}

/// Median of the pairwise Euclidean distances over the pooled rows of both
/// arrays, floored at [`BANDWIDTH_FLOOR`].
pub fn median_heuristic<S: Scalar>(hs: &Tensor<S>, ht: &Tensor<S>) -> f64 {
    let rows: Vec<&[S]> = (0..hs.rows())
        .map(|i| hs.row(i))
        .chain((0..ht.rows()).map(|i| ht.row(i)))
        .collect();
    let mut dists = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d2: f64 = rows[i]
                .iter()
                .zip(rows[j])
                .map(|(&a, &b)| (a - b).as_f64().powi(2))
                .sum();
            dists.push(d2.sqrt());
        }
    }
    if dists.is_empty() {
        return BANDWIDTH_FLOOR;
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    median.max(BANDWIDTH_FLOOR)
}

/// Adaptation rate `2 / (1 + exp(−γp)) − 1` at training progress `p`.
pub fn dann_lambda(progress: f64, gamma: f64) -> f64 {
    2.0 / (1.0 + (-gamma * progress).exp()) - 1.0
}

/// Domain cross-entropy behind a gradient-reversal boundary, averaged over
/// the two domains and weighted by `lambda`. The domain head receives
/// `λ·∇`, the encoder `−λ·∇`.
pub fn dann_domain_loss<S: Scalar>(
    g: &mut Graph<S>,
    model: &ModelVars,
    hs: Var,
    ht: Var,
    source_size: usize,
    target_size: usize,
    lambda: f64,
) -> Result<Var> {
    let mut term = |h: Var, d: Domain, n: usize| -> Result<Var> {
        let r = g.grad_reverse(h, S::one());
        let logits = model.domain_logits(g, r);
        cross_entropy(g, logits, &vec![d.index(); n], Domain::ALL.len())
    };
    let ls = term(hs, Domain::Source, source_size)?;
    let lt = term(ht, Domain::Target, target_size)?;
    let sum = g.add(ls, lt);
    Ok(g.scale(sum, S::lit(0.5 * lambda)))
}

/// Task CE plus [`dann_domain_loss`].
#[allow(clippy::too_many_arguments)]
pub fn dann_step_loss<S: Scalar>(
    g: &mut Graph<S>,
    model: &ModelVars,
    task_logits: Var,
    labels: &[usize],
    hs: Var,
    ht: Var,
    target_size: usize,
    lambda: f64,
) -> Result<Var> {
    let task = task_loss(g, task_logits, labels, model.config().num_classes)?;
    let dom = dann_domain_loss(g, model, hs, ht, labels.len(), target_size, lambda)?;
    Ok(g.add(task, dom))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialMode {
    /// Cross-entropy of the perturbed input against its label.
    Standard,
    /// Symmetric KL between perturbed and clean predictions.
    Virtual,
}

/// Loss on an already-crafted perturbation `delta` (a graph node shaped like
/// the embedded batch).
pub fn adversarial_training_loss<S: Scalar>(
    g: &mut Graph<S>,
    model: &ModelVars,
    batch: &TokenBatch,
    delta: Var,
    mode: AdversarialMode,
) -> Result<Var> {
    let e = model.embed(g, batch);
    let hp = model.encode(g, e, Some(delta), batch);
    let perturbed = model.task_logits(g, hp);
    match mode {
        AdversarialMode::Standard => {
            let labels = batch.labels().ok_or_else(|| {
                Error::InvalidInput("standard adversarial loss needs labels".into())
            })?;
            task_loss(g, perturbed, labels, model.config().num_classes)
        }
        AdversarialMode::Virtual => {
            let h = model.encode(g, e, None, batch);
            let clean = model.task_logits(g, h);
            Ok(symmetric_kl(g, perturbed, clean))
        }
    }
}

/// Graph nodes of every term of the total loss.
#[derive(Clone, Copy, Debug)]
pub struct TotalLoss {
    pub task: Var,
    pub domain: Option<Var>,
    pub contrast: Option<Var>,
    pub consist: Option<Var>,
    pub total: Var,
}

/// Scalar values of a [`TotalLoss`] after evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub domain: Option<f64>,
    pub contrast: Option<f64>,
    pub consist: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// `task + α·domain + λ·contrast + β·consist`, missing terms as zero.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        self.task
            + w.alpha * self.domain.unwrap_or(0.0)
            + w.lambda_contrast * self.contrast.unwrap_or(0.0)
            + w.beta * self.consist.unwrap_or(0.0)
    }
}

impl TotalLoss {
    pub fn breakdown<S: Scalar>(&self, g: &Graph<S>) -> Result<LossBreakdown> {
        let get = |v: Var| -> Result<f64> {
            g.scalar(v)
                .map(Scalar::as_f64)
                .ok_or(Error::Graph(crate::autodiff::GraphError::NotEvaluated))
        };
        let opt = |v: Option<Var>| v.map(get).transpose();
        Ok(LossBreakdown {
            task: get(self.task)?,
            domain: opt(self.domain)?,
            contrast: opt(self.contrast)?,
            consist: opt(self.consist)?,
            total: get(self.total)?,
        })
    }
}

/// Clean and perturbed views of one single-domain batch.
pub struct DomainView<'a, S> {
    pub batch: &'a TokenBatch,
    pub delta: &'a Tensor<S>,
}

/// Builds the full objective: task cross-entropy on the source batch plus the
/// weighted auxiliary terms, each computed per batch and averaged over the
/// two domains.
pub fn total_loss<S: Scalar>(
    g: &mut Graph<S>,
    model: &ModelVars,
    source: DomainView<'_, S>,
    target: DomainView<'_, S>,
    weights: &LossWeights,
    components: Components,
    variant: DomainLossVariant,
) -> Result<TotalLoss> {
    let labels = source
        .batch
        .labels()
        .ok_or_else(|| Error::InvalidInput("source batch has no labels".into()))?;
    let num_classes = model.config().num_classes;

    let mut task = None;
    let mut terms: [Vec<Var>; 3] = Default::default();
    for (i, view) in [source, target].into_iter().enumerate() {
        let b = view.batch;
        let d = b.domain().ok_or(Error::MixedDomain)?;
        let e = model.embed(g, b);
        let h = model.encode(g, e, None, b);
        let clean_task = (i == 0 || components.consist).then(|| model.task_logits(g, h));
        if i == 0 {
            task = Some(task_loss(g, clean_task.expect("built"), labels, num_classes)?);
        }
        if !components.any() {
            continue;
        }
        let delta = g.constant(view.delta.clone());
        let hp = model.encode(g, e, Some(delta), b);
        if components.domain {
            let clean = model.domain_logits(g, h);
            let pert = model.domain_logits(g, hp);
            let ids = vec![d.index(); b.size];
            terms[0].push(domain_loss(g, clean, pert, &ids, weights.alpha_adv, variant)?);
        }
        if components.contrast {
            let z = model.project(g, h);
            let zp = model.project(g, hp);
            terms[1].push(contrastive_loss(g, z, zp, weights.tau, &b.domains)?);
        }
        if components.consist {
            let pert = model.task_logits(g, hp);
            terms[2].push(consistency_loss(g, clean_task.expect("built"), pert));
        }
    }
    let task = task.expect("source processed");
    let mut averaged = terms.map(|t| {
        (!t.is_empty()).then(|| {
            let s = g.add(t[0], t[1]);
            g.scale(s, S::lit(0.5))
        })
    });
    let [domain, contrast, consist] = std::mem::take(&mut averaged);
    let mut total = task;
    for (term, w) in [
        (domain, weights.alpha),
        (contrast, weights.lambda_contrast),
        (consist, weights.beta),
    ] {
        if let Some(t) = term {
            let scaled = g.scale(t, S::lit(w));
            total = g.add(total, scaled);
        }
    }
    Ok(TotalLoss {
        task,
        domain,
        contrast,
        consist,
        total,
    })
}

/// Builds a graph with `build`, evaluates it without bindings and returns the
/// scalar output. Handy for computing a loss on plain arrays.
pub fn evaluate_scalar<S: Scalar>(
    build: impl FnOnce(&mut Graph<S>) -> Result<Var>,
) -> Result<S> {
    let mut g = Graph::new();
    let out = build(&mut g)?;
    g.evaluate(&Bindings::new())?;
    g.scalar(out).ok_or_else(|| {
        Error::Shape(format!(
            "loss output is not a scalar: {:?}",
            g.value(out).map(Tensor::shape)
        ))
    })
}
