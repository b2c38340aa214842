//! Bag-of-embeddings encoder with task, domain and projection heads.
//!
//! `h = tanh(tanh(pool(E[x] + δ) · W1 + b1) · W2 + b2)` where `pool` averages
//! the non-padding positions. Heads are affine maps of `h`; the projection
//! head is affine-tanh-affine.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, Var};
use crate::corpus::{Domain, LabeledExample, Sequence};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NUM_DOMAINS: usize = 2;
const INIT_SCALE: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub proj_dim: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            seq_len: 32,
            embed_dim: 64,
            hidden_dim: 64,
            proj_dim: 32,
            num_classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.seq_len,
            self.embed_dim,
            self.hidden_dim,
            self.proj_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        Ok(())
    }
}

/// Index of each parameter array in [`Params::tensors`].
pub mod slot {
    pub const EMBEDDING: usize = 0;
    pub const ENC_W1: usize = 1;
    pub const ENC_B1: usize = 2;
    pub const ENC_W2: usize = 3;
    pub const ENC_B2: usize = 4;
    pub const TASK_W: usize = 5;
    pub const TASK_B: usize = 6;
    pub const DOMAIN_W: usize = 7;
    pub const DOMAIN_B: usize = 8;
    pub const PROJ_W1: usize = 9;
    pub const PROJ_B1: usize = 10;
    pub const PROJ_W2: usize = 11;
    pub const PROJ_B2: usize = 12;
    pub const COUNT: usize = 13;

    /// Arrays belonging to the encoder, i.e. the shared feature extractor.
    pub const ENCODER: [usize; 5] = [EMBEDDING, ENC_W1, ENC_B1, ENC_W2, ENC_B2];
}

pub const PARAM_NAMES: [&str; slot::COUNT] = [
    "embedding",
    "encoder.w1",
    "encoder.b1",
    "encoder.w2",
    "encoder.b2",
    "task.w",
    "task.b",
    "domain.w",
    "domain.b",
    "projection.w1",
    "projection.b1",
    "projection.w2",
    "projection.b2",
];

/// All trainable arrays, in [`PARAM_NAMES`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<S> {
    config: ModelConfig,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Params<S> {
    fn shapes(c: &ModelConfig) -> [Vec<usize>; slot::COUNT] {
        let (v, d, h, p, k) = (
            c.vocab_size,
            c.embed_dim,
            c.hidden_dim,
            c.proj_dim,
            c.num_classes,
        );
        [
            vec![v, d],
            vec![d, h],
            vec![h],
            vec![h, h],
            vec![h],
            vec![h, k],
            vec![k],
            vec![h, NUM_DOMAINS],
            vec![NUM_DOMAINS],
            vec![h, p],
            vec![p],
            vec![p, p],
            vec![p],
        ]
    }

    /// Weights and embeddings uniform in ±0.08, biases zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Stream::Init);
        let tensors = Self::shapes(&config)
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else {
                    Tensor::from_fn(&shape, |_| {
                        S::lit(rng.random_range(-INIT_SCALE..=INIT_SCALE))
                    })
                }
            })
            .collect();
        Ok(Self { config, tensors })
    }

    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<S>>) -> Result<Self> {
        config.validate()?;
        let shapes = Self::shapes(&config);
        if tensors.len() != slot::COUNT {
            return Err(Error::Shape(format!(
                "expected {} parameter arrays, got {}",
                slot::COUNT,
                tensors.len()
            )));
        }
        for ((t, s), name) in tensors.iter().zip(&shapes).zip(PARAM_NAMES) {
            if t.shape() != s.as_slice() {
                return Err(Error::Shape(format!(
                    "{name}: expected {s:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn get(&self, slot: usize) -> &Tensor<S> {
        &self.tensors[slot]
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor<S>)> {
        PARAM_NAMES.into_iter().zip(&self.tensors)
    }

    /// Adds every parameter as a differentiable leaf.
    pub fn declare(&self, g: &mut Graph<S>) -> ModelVars {
        let vars = self
            .named()
            .map(|(name, t)| g.leaf(name, t.shape()))
            .collect::<Vec<_>>();
        ModelVars::from_vec(vars, self.config)
    }

    /// Adds every parameter as a constant; nothing flows back into them.
    pub fn constants(&self, g: &mut Graph<S>) -> ModelVars {
        let vars = self
            .tensors
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Vec<_>>();
        ModelVars::from_vec(vars, self.config)
    }

    pub fn bind(&self, vars: &ModelVars, bindings: &mut Bindings<S>) {
        for (v, t) in vars.all().iter().zip(&self.tensors) {
            bindings.bind(*v, t.clone());
        }
    }

    /// Checks ids against the vocabulary.
    pub fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        if let Some(&id) = batch
            .ids
            .iter()
            .zip(&batch.mask)
            .find(|(&id, &m)| m && id >= self.config.vocab_size)
            .map(|(id, _)| id)
        {
            return Err(Error::OutOfVocabulary {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Embedding lookup outside any graph.
    pub fn embed(&self, batch: &TokenBatch) -> Result<EmbeddedBatch<S>> {
        self.check_batch(batch)?;
        let d = self.config.embed_dim;
        let table = &self.tensors[slot::EMBEDDING];
        let mut values = vec![S::zero(); batch.size * batch.seq_len * d];
        for (p, (&id, &m)) in batch.ids.iter().zip(&batch.mask).enumerate() {
            if m {
                values[p * d..(p + 1) * d].copy_from_slice(table.row(id));
            }
        }
        Ok(EmbeddedBatch {
            values: Tensor::new(vec![batch.size, batch.seq_len, d], values)?,
            mask: batch.mask.clone(),
            domains: batch.domains.clone(),
            labels: batch.labels.clone(),
        })
    }

    /// Encoder output `h` for a batch, optionally perturbed at the embedding layer.
    pub fn hidden(&self, batch: &TokenBatch, delta: Option<&Tensor<S>>) -> Result<Tensor<S>> {
        self.forward(batch, delta, |_, _, h| h)
    }

    pub fn task_logits(&self, batch: &TokenBatch) -> Result<Tensor<S>> {
        self.forward(batch, None, |g, m, h| m.task_logits(g, h))
    }

    pub fn domain_logits(&self, batch: &TokenBatch) -> Result<Tensor<S>> {
        self.forward(batch, None, |g, m, h| m.domain_logits(g, h))
    }

    pub fn projection(&self, batch: &TokenBatch) -> Result<Tensor<S>> {
        self.forward(batch, None, |g, m, h| m.project(g, h))
    }

    fn forward(
        &self,
        batch: &TokenBatch,
        delta: Option<&Tensor<S>>,
        head: impl FnOnce(&mut Graph<S>, &ModelVars, Var) -> Var,
    ) -> Result<Tensor<S>> {
        self.check_batch(batch)?;
        let mut g = Graph::new();
        let m = self.constants(&mut g);
        let e = m.embed(&mut g, batch);
        let d = delta.map(|t| g.constant(t.clone()));
        let h = m.encode(&mut g, e, d, batch);
        let out = head(&mut g, &m, h);
        g.evaluate(&Bindings::new())?;
        Ok(g.value(out).expect("evaluated").clone())
    }

    /// Writes the text checkpoint format described in the crate README.
    pub fn save(&self, path: &Path) -> Result<()> {
        let c = &self.config;
        let mut out = String::new();
        out.push_str("dccl-checkpoint 1\n");
        let _ = writeln!(
            out,
            "config vocab_size={} seq_len={} embed_dim={} hidden_dim={} proj_dim={} num_classes={}",
            c.vocab_size, c.seq_len, c.embed_dim, c.hidden_dim, c.proj_dim, c.num_classes
        );
        for (name, t) in self.named() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(out, "tensor {name} {}", dims.join(" "));
            let vals: Vec<String> = t.data().iter().map(|v| v.to_string()).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "dccl-checkpoint 1")) => {}
            _ => return Err(err(1, "missing `dccl-checkpoint 1` header".into())),
        }
        let (_, cfg_line) = lines.next().ok_or_else(|| err(2, "missing config".into()))?;
        let mut config = ModelConfig::default();
        let mut fields = cfg_line.split_whitespace();
        if fields.next() != Some("config") {
            return Err(err(2, "expected `config` line".into()));
        }
        for kv in fields {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| err(2, format!("bad field `{kv}`")))?;
            let v: usize = v.parse().map_err(|_| err(2, format!("bad value in `{kv}`")))?;
            match k {
                "vocab_size" => config.vocab_size = v,
                "seq_len" => config.seq_len = v,
                "embed_dim" => config.embed_dim = v,
                "hidden_dim" => config.hidden_dim = v,
                "proj_dim" => config.proj_dim = v,
                "num_classes" => config.num_classes = v,
                other => return Err(err(2, format!("unknown config key `{other}`"))),
            }
        }
        let mut tensors = Vec::with_capacity(slot::COUNT);
        while let Some((i, header)) = lines.next() {
            if header.trim().is_empty() {
                continue;
            }
            let mut parts = header.split_whitespace();
            if parts.next() != Some("tensor") {
                return Err(err(i + 1, "expected `tensor` line".into()));
            }
            let name = parts.next().ok_or_else(|| err(i + 1, "missing name".into()))?;
            let expected = PARAM_NAMES.get(tensors.len()).copied();
            if Some(name) != expected {
                return Err(err(i + 1, format!("expected tensor {expected:?}, found `{name}`")));
            }
            let shape = parts
                .map(|p| p.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| err(i + 1, e.to_string()))?;
            let (j, body) = lines
                .next()
                .ok_or_else(|| err(i + 2, "missing values".into()))?;
            let data = body
                .split_whitespace()
                .map(|v| v.parse::<S>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| err(j + 1, "unparsable value".into()))?;
            tensors.push(Tensor::new(shape, data).map_err(|e| err(j + 1, e.to_string()))?);
        }
        Self::from_tensors(config, tensors)
    }
}

/// Graph handles for every parameter array.
#[derive(Clone, Debug)]
pub struct ModelVars {
    vars: Vec<Var>,
    config: ModelConfig,
}

impl ModelVars {
    fn from_vec(vars: Vec<Var>, config: ModelConfig) -> Self {
        debug_assert_eq!(vars.len(), slot::COUNT);
        Self { vars, config }
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }

    pub fn get(&self, slot: usize) -> Var {
        self.vars[slot]
    }

    pub fn embed<S: Scalar>(&self, g: &mut Graph<S>, batch: &TokenBatch) -> Var {
        g.gather(
            self.vars[slot::EMBEDDING],
            batch.ids.clone(),
            batch.mask.clone(),
            batch.size,
            batch.seq_len,
        )
    }

    /// Encoder output for embedded tokens plus an optional perturbation of the same shape.
    pub fn encode<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        embedded: Var,
        delta: Option<Var>,
        batch: &TokenBatch,
    ) -> Var {
        let x = match delta {
            Some(d) => g.add(embedded, d),
            None => embedded,
        };
        let pooled = g.masked_mean_pool(x, batch.mask.clone());
        let a1 = g.affine(pooled, self.vars[slot::ENC_W1], self.vars[slot::ENC_B1]);
        let h1 = g.tanh(a1);
        let a2 = g.affine(h1, self.vars[slot::ENC_W2], self.vars[slot::ENC_B2]);
        g.tanh(a2)
    }

    pub fn task_logits<S: Scalar>(&self, g: &mut Graph<S>, h: Var) -> Var {
        g.affine(h, self.vars[slot::TASK_W], self.vars[slot::TASK_B])
    }

    pub fn domain_logits<S: Scalar>(&self, g: &mut Graph<S>, h: Var) -> Var {
        g.affine(h, self.vars[slot::DOMAIN_W], self.vars[slot::DOMAIN_B])
    }

    pub fn project<S: Scalar>(&self, g: &mut Graph<S>, h: Var) -> Var {
        let a = g.affine(h, self.vars[slot::PROJ_W1], self.vars[slot::PROJ_B1]);
        let t = g.tanh(a);
        g.affine(t, self.vars[slot::PROJ_W2], self.vars[slot::PROJ_B2])
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
}

/// Padded token ids for one batch. Position `(i, t)` is padding when `mask` is false.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub size: usize,
    pub seq_len: usize,
    pub domains: Vec<Domain>,
    labels: Option<Vec<usize>>,
}

impl TokenBatch {
    /// Pads or truncates each sequence to `seq_len`.
    pub fn new(
        sequences: &[&[usize]],
        seq_len: usize,
        domains: Vec<Domain>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if domains.len() != sequences.len()
            || labels.as_ref().is_some_and(|l| l.len() != sequences.len())
        {
            return Err(Error::InvalidInput(
                "per-example domains/labels do not match the batch size".into(),
            ));
        }
        let size = sequences.len();
        let mut ids = vec![0; size * seq_len];
        let mut mask = vec![false; size * seq_len];
        for (i, seq) in sequences.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::EmptyExample { index: i });
            }
            for (t, &id) in seq.iter().take(seq_len).enumerate() {
                ids[i * seq_len + t] = id;
                mask[i * seq_len + t] = true;
            }
        }
        Ok(Self {
            ids,
            mask,
            size,
            seq_len,
            domains,
            labels,
        })
    }

    pub fn unlabeled<T: Sequence>(examples: &[&T], seq_len: usize) -> Result<Self> {
        let seqs: Vec<&[usize]> = examples.iter().map(|e| e.tokens()).collect();
        let domains = examples.iter().map(|e| e.domain()).collect();
        Self::new(&seqs, seq_len, domains, None)
    }

    pub fn labeled(examples: &[&LabeledExample], seq_len: usize) -> Result<Self> {
        let seqs: Vec<&[usize]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
        let domains = examples.iter().map(|e| e.domain).collect();
        let labels = examples.iter().map(|e| e.label).collect();
        Self::new(&seqs, seq_len, domains, Some(labels))
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// The single domain of the batch, or `None` if it is mixed or empty.
    pub fn domain(&self) -> Option<Domain> {
        let first = *self.domains.first()?;
        self.domains.iter().all(|&d| d == first).then_some(first)
    }

    pub fn domain_ids(&self) -> Vec<usize> {
        self.domains.iter().map(|d| d.index()).collect()
    }

    /// Same batch with different token ids at the same positions (e.g. masked copies).
    pub fn with_tokens(&self, sequences: &[&[usize]]) -> Result<Self> {
        let mut out = Self::new(sequences, self.seq_len, self.domains.clone(), self.labels.clone())?;
        if out.mask != self.mask {
            return Err(Error::InvalidInput("replacement changes sequence lengths".into()));
        }
        out.labels = self.labels.clone();
        Ok(out)
    }
}

/// Embedded tokens `[N, L, D]` with their padding mask and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedBatch<S> {
    pub values: Tensor<S>,
    pub mask: Vec<bool>,
    pub domains: Vec<Domain>,
    pub labels: Option<Vec<usize>>,
}
