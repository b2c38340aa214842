//! Training drivers for the adaptation method and every baseline.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, Var};
use crate::corpus::{
    make_batches, mask_domain_tokens, Domain, DomainTokenStats, GeneratedCorpus, LabeledExample,
    Sequence, UnlabeledExample,
};
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::model::{ModelConfig, ModelVars, Params, TokenBatch};
use crate::objectives::{
    contrastive_loss, dann_domain_loss, dann_lambda, kl_matching_loss, median_heuristic,
    mmd_loss, task_loss, total_loss, Components, DomainLossVariant, DomainView, LossWeights,
};
use crate::optim::{lr_schedule, optimizer_step, AdamState};
use crate::perturb::{craft_domain_puzzle, PerturbConfig};
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SourceOnly,
    Kl,
    Mmd,
    Dann,
    Mask,
    MaskCl,
    Dccl,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::SourceOnly,
        Method::Kl,
        Method::Mmd,
        Method::Dann,
        Method::Mask,
        Method::MaskCl,
        Method::Dccl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SourceOnly => "source_only",
            Method::Kl => "kl",
            Method::Mmd => "mmd",
            Method::Dann => "dann",
            Method::Mask => "mask",
            Method::MaskCl => "mask_cl",
            Method::Dccl => "dccl",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub method: Method,
    pub model: ModelConfig,
    pub perturb: PerturbConfig,
    pub weights: LossWeights,
    /// Auxiliary terms used by the adaptation method.
    pub components: Components,
    pub domain_variant: DomainLossVariant,
    pub dann_gamma: f64,
    /// Weight of the distribution-matching term for `kl` and `mmd`.
    pub matching_weight: f64,
    pub mask_threshold: f64,
    pub mask_smoothing: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 32,
            learning_rate: 1e-3,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            seed: 0,
            method: Method::Dccl,
            model: ModelConfig::default(),
            perturb: PerturbConfig::default(),
            weights: LossWeights::default(),
            components: Components::ALL,
            domain_variant: DomainLossVariant::Label,
            dann_gamma: 0.1,
            matching_weight: 1.0,
            mask_threshold: 5.0,
            mask_smoothing: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size < 2 {
            return bad("batch size must be >= 2");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup fraction must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be >= 0");
        }
        if !(self.matching_weight >= 0.0) {
            return bad("matching weight must be >= 0");
        }
        if !(self.mask_smoothing > 0.0) {
            return bad("mask smoothing must be positive");
        }
        if self.mask_threshold.is_nan() {
            return bad("mask threshold must be a number");
        }
        self.model.validate()?;
        self.perturb.validate()?;
        self.weights.validate()
    }
}

/// Everything a training run may read. There is deliberately no field for
/// target labels.
#[derive(Clone, Copy, Debug)]
pub struct TrainingData<'a> {
    pub source: &'a [LabeledExample],
    pub target: &'a [UnlabeledExample],
    pub source_val: &'a [LabeledExample],
}

impl<'a> TrainingData<'a> {
    pub fn from_corpus(c: &'a GeneratedCorpus) -> Self {
        Self {
            source: &c.source_train,
            target: &c.target_train,
            source_val: &c.source_val,
        }
    }
}

/// Per-epoch averages of every loss term plus validation error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub task: f64,
    pub domain: Option<f64>,
    pub contrast: Option<f64>,
    pub consist: Option<f64>,
    /// KL/MMD matching term, DANN domain term, or masked-copy task loss.
    pub auxiliary: Option<f64>,
    pub total: f64,
    pub source_val_error: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub zero_grad_skips: usize,
}

/// Writes one JSON object per epoch.
pub fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for m in metrics {
        serde_json::to_writer(&mut w, m).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Epoch chosen by minimum source-validation error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub source_val_error: f64,
}

/// How many labels each domain handed to a loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelReads {
    pub source: u64,
    pub target: u64,
}

impl LabelReads {
    fn record(&mut self, examples: &[&LabeledExample]) {
        for e in examples {
            match e.domain {
                Domain::Source => self.source += 1,
                Domain::Target => self.target += 1,
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    /// Parameters of the checkpointed epoch.
    pub params: Params<S>,
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
    pub label_reads: LabelReads,
}

/// Chooses the epoch with the lowest source-validation error; later epochs
/// win ties. Only source validation data is ever consulted.
pub fn select_checkpoint(errors: &[f64]) -> Option<Checkpoint> {
    let mut best: Option<Checkpoint> = None;
    for (i, &e) in errors.iter().enumerate() {
        if best.is_none_or(|b| e <= b.source_val_error) {
            best = Some(Checkpoint {
                epoch: i + 1,
                source_val_error: e,
            });
        }
    }
    best
}

pub fn train_dccl<S: Scalar>(data: TrainingData<'_>, cfg: &TrainConfig) -> Result<TrainOutcome<S>> {
    if cfg.method != Method::Dccl {
        return Err(Error::InvalidConfig(format!(
            "train_dccl called with method `{}`",
            cfg.method
        )));
    }
    train(data, cfg)
}

pub fn train_baseline<S: Scalar>(
    data: TrainingData<'_>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    if cfg.method == Method::Dccl {
        return Err(Error::InvalidConfig("train_baseline called with method `dccl`".into()));
    }
    train(data, cfg)
}

/// Nodes of one step's objective.
struct StepLoss {
    task: Var,
    domain: Option<Var>,
    contrast: Option<Var>,
    consist: Option<Var>,
    auxiliary: Option<Var>,
    total: Var,
}

#[derive(Default)]
struct Sums {
    task: f64,
    domain: Option<f64>,
    contrast: Option<f64>,
    consist: Option<f64>,
    auxiliary: Option<f64>,
    total: f64,
}

fn add_opt(acc: &mut Option<f64>, v: Option<f64>) {
    if let Some(v) = v {
        *acc = Some(acc.unwrap_or(0.0) + v);
    }
}

/// Masked token sequences for a whole collection.
fn masked_sequences<T: Sequence>(
    examples: &[T],
    stats: &DomainTokenStats,
    threshold: f64,
) -> Vec<Vec<usize>> {
    examples
        .iter()
        .map(|e| mask_domain_tokens(e.tokens(), e.domain(), stats, threshold).0)
        .collect()
}

fn masked_batch(batch: &TokenBatch, masked: &[Vec<usize>], idx: &[usize]) -> Result<TokenBatch> {
    let seqs: Vec<&[usize]> = idx.iter().map(|&i| masked[i].as_slice()).collect();
    batch.with_tokens(&seqs)
}

/// Cycles through shuffled epochs of single-domain batches.
struct BatchStream<R> {
    len: usize,
    batch_size: usize,
    rng: R,
    pending: std::vec::IntoIter<Vec<usize>>,
}

impl<R: Rng> BatchStream<R> {
    fn new<T: Sequence>(examples: &[T], batch_size: usize, mut rng: R) -> Result<Self> {
        let pending = make_batches(examples, batch_size, &mut rng)?.into_iter();
        Ok(Self {
            len: examples.len(),
            batch_size,
            rng,
            pending,
        })
    }

    fn next<T: Sequence>(&mut self, examples: &[T]) -> Result<Vec<usize>> {
        debug_assert_eq!(examples.len(), self.len);
        if let Some(b) = self.pending.next() {
            return Ok(b);
        }
        self.pending = make_batches(examples, self.batch_size, &mut self.rng)?.into_iter();
        Ok(self.pending.next().expect("at least one batch"))
    }
}

/// Runs training for `cfg.method` and returns the checkpointed parameters.
pub fn train<S: Scalar>(data: TrainingData<'_>, cfg: &TrainConfig) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if data.source_val.is_empty() {
        return Err(Error::InvalidInput("source validation set is empty".into()));
    }
    let n = cfg.batch_size;
    let seq_len = cfg.model.seq_len;
    let mut params = Params::<S>::init(cfg.model, cfg.seed)?;
    let mut adam = AdamState::new(params.tensors());

    let mut source_rng = stream(cfg.seed, Stream::SourceBatches);
    let mut target_stream =
        BatchStream::new(data.target, n, stream(cfg.seed, Stream::TargetBatches))?;
    let mut noise_rng = stream(cfg.seed, Stream::PerturbNoise);

    let masks = if matches!(cfg.method, Method::Mask | Method::MaskCl) {
        let stats = DomainTokenStats::from_corpora(
            cfg.model.vocab_size,
            data.source,
            data.target,
            cfg.mask_smoothing,
        )?;
        Some((
            masked_sequences(data.source, &stats, cfg.mask_threshold),
            masked_sequences(data.target, &stats, cfg.mask_threshold),
        ))
    } else {
        None
    };

    let steps_per_epoch = data.source.len() / n;
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut label_reads = LabelReads::default();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(Checkpoint, Params<S>)> = None;
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let source_batches = make_batches(data.source, n, &mut source_rng)?;
        let mut sums = Sums::default();
        let mut skips = 0;
        let mut lr = 0.0;
        for sidx in &source_batches {
            let tidx = target_stream.next(data.target)?;
            let s_examples: Vec<&LabeledExample> = sidx.iter().map(|&i| &data.source[i]).collect();
            let t_examples: Vec<&UnlabeledExample> =
                tidx.iter().map(|&i| &data.target[i]).collect();
            let sb = TokenBatch::labeled(&s_examples, seq_len)?;
            label_reads.record(&s_examples);
            let tb = TokenBatch::unlabeled(&t_examples, seq_len)?;
            params.check_batch(&sb)?;
            params.check_batch(&tb)?;

            let mut g = Graph::new();
            let m = params.declare(&mut g);
            let loss = match cfg.method {
                Method::Dccl => {
                    let (ds, dt) = if cfg.components.any() {
                        let ds = craft_domain_puzzle(&params, &sb, &cfg.perturb, &mut noise_rng)?;
                        let dt = craft_domain_puzzle(&params, &tb, &cfg.perturb, &mut noise_rng)?;
                        skips += ds.diagnostics.zero_grad_skips + dt.diagnostics.zero_grad_skips;
                        (ds.delta, dt.delta)
                    } else {
                        // unused by the objective
                        (Tensor::zeros(&[0]), Tensor::zeros(&[0]))
                    };
                    let tl = total_loss(
                        &mut g,
                        &m,
                        DomainView {
                            batch: &sb,
                            delta: &ds,
                        },
                        DomainView {
                            batch: &tb,
                            delta: &dt,
                        },
                        &cfg.weights,
                        cfg.components,
                        cfg.domain_variant,
                    )?;
                    StepLoss {
                        task: tl.task,
                        domain: tl.domain,
                        contrast: tl.contrast,
                        consist: tl.consist,
                        auxiliary: None,
                        total: tl.total,
                    }
                }
                method => {
                    let progress = step as f64 / total_steps as f64;
                    let masked = masks.as_ref().map(|(ms, mt)| -> Result<_> {
                        Ok((masked_batch(&sb, ms, sidx)?, masked_batch(&tb, mt, &tidx)?))
                    });
                    let masked = masked.transpose()?;
                    baseline_loss(&mut g, &m, &params, method, cfg, &sb, &tb, masked, progress)?
                }
            };

            let mut bindings = Bindings::new();
            params.bind(&m, &mut bindings);
            g.evaluate(&bindings).map_err(|e| Error::NonFinite {
                what: format!("loss ({e})"),
                step,
            })?;
            let value = |v: Var| g.scalar(v).expect("scalar").as_f64();
            let total = value(loss.total);
            if !total.is_finite() {
                return Err(Error::NonFinite {
                    what: "total loss".into(),
                    step,
                });
            }
            let task = value(loss.task);
            let (dom, con, cons, aux) = (
                loss.domain.map(value),
                loss.contrast.map(value),
                loss.consist.map(value),
                loss.auxiliary.map(value),
            );
            if cfg.method == Method::Dccl {
                let w = &cfg.weights;
                let recombined = task
                    + w.alpha * dom.unwrap_or(0.0)
                    + w.lambda_contrast * con.unwrap_or(0.0)
                    + w.beta * cons.unwrap_or(0.0);
                assert!(
                    (recombined - total).abs() <= 1e-10 * (1.0 + total.abs()),
                    "loss breakdown does not recombine at step {step}"
                );
            }
            sums.task += task;
            sums.total += total;
            add_opt(&mut sums.domain, dom);
            add_opt(&mut sums.contrast, con);
            add_opt(&mut sums.consist, cons);
            add_opt(&mut sums.auxiliary, aux);

            let mut grads = g.backward(loss.total)?;
            let grads: Vec<_> = m
                .all()
                .iter()
                .map(|&v| grads.take(v).expect("leaf gradient"))
                .collect();
            lr = lr_schedule(step, total_steps, cfg.warmup_fraction, cfg.learning_rate);
            optimizer_step(params.tensors_mut(), &grads, &mut adam, lr, cfg.weight_decay)
                .map_err(|e| match e {
                    Error::NonFinite { what, .. } => Error::NonFinite { what, step },
                    other => other,
                })?;
            step += 1;
        }

        let val_error = 1.0 - accuracy(&params, data.source_val)?;
        let k = source_batches.len() as f64;
        let avg = |v: Option<f64>| v.map(|x| x / k);
        metrics.push(EpochMetrics {
            epoch,
            steps: source_batches.len(),
            task: sums.task / k,
            domain: avg(sums.domain),
            contrast: avg(sums.contrast),
            consist: avg(sums.consist),
            auxiliary: avg(sums.auxiliary),
            total: sums.total / k,
            source_val_error: val_error,
            lr,
            zero_grad_skips: skips,
        });
        if best
            .as_ref()
            .is_none_or(|(b, _)| val_error <= b.source_val_error)
        {
            best = Some((
                Checkpoint {
                    epoch,
                    source_val_error: val_error,
                },
                params.clone(),
            ));
        }
    }
    let (checkpoint, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        checkpoint,
        metrics,
        label_reads,
    })
}

#[allow(clippy::too_many_arguments)]
fn baseline_loss<S: Scalar>(
    g: &mut Graph<S>,
    m: &ModelVars,
    params: &Params<S>,
    method: Method,
    cfg: &TrainConfig,
    sb: &TokenBatch,
    tb: &TokenBatch,
    masked: Option<(TokenBatch, TokenBatch)>,
    progress: f64,
) -> Result<StepLoss> {
    let labels = sb.labels().expect("source batch is labeled");
    let k = cfg.model.num_classes;
    let es = m.embed(g, sb);
    let hs = m.encode(g, es, None, sb);
    let logits = m.task_logits(g, hs);
    let task = task_loss(g, logits, labels, k)?;
    let mut out = StepLoss {
        task,
        domain: None,
        contrast: None,
        consist: None,
        auxiliary: None,
        total: task,
    };
    let target_hidden = |g: &mut Graph<S>| {
        let et = m.embed(g, tb);
        m.encode(g, et, None, tb)
    };
    match method {
        Method::SourceOnly => {}
        Method::Kl | Method::Mmd => {
            let ht = target_hidden(g);
            let aux = if method == Method::Kl {
                kl_matching_loss(g, hs, ht)
            } else {
                let bw = median_heuristic(&params.hidden(sb, None)?, &params.hidden(tb, None)?);
                mmd_loss(g, hs, ht, bw)
            };
            let weighted = g.scale(aux, S::lit(cfg.matching_weight));
            out.auxiliary = Some(aux);
            out.total = g.add(task, weighted);
        }
        Method::Dann => {
            let ht = target_hidden(g);
            let lambda = dann_lambda(progress, cfg.dann_gamma);
            let dom = dann_domain_loss(g, m, hs, ht, sb.size, tb.size, lambda)?;
            out.auxiliary = Some(dom);
            out.total = g.add(task, dom);
        }
        Method::Mask | Method::MaskCl => {
            let (msb, mtb) = masked.expect("masked batches prepared");
            let ems = m.embed(g, &msb);
            let hms = m.encode(g, ems, None, &msb);
            let mlogits = m.task_logits(g, hms);
            let masked_task = task_loss(g, mlogits, labels, k)?;
            let sum = g.add(task, masked_task);
            let mut total = g.scale(sum, S::lit(0.5));
            out.auxiliary = Some(masked_task);
            if method == Method::MaskCl {
                let zs = m.project(g, hs);
                let zms = m.project(g, hms);
                let cs = contrastive_loss(g, zs, zms, cfg.weights.tau, &sb.domains)?;
                let ht = target_hidden(g);
                let emt = m.embed(g, &mtb);
                let hmt = m.encode(g, emt, None, &mtb);
                let zt = m.project(g, ht);
                let zmt = m.project(g, hmt);
                let ct = contrastive_loss(g, zt, zmt, cfg.weights.tau, &tb.domains)?;
                let c = g.add(cs, ct);
                let c = g.scale(c, S::lit(0.5));
                let weighted = g.scale(c, S::lit(cfg.weights.lambda_contrast));
                total = g.add(total, weighted);
                out.contrast = Some(c);
            }
            out.total = total;
        }
        Method::Dccl => unreachable!("handled by the caller"),
    }
    Ok(out)
}
