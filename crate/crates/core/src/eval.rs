//! Accuracy, proxy A-distance, embedding dumps and multi-seed statistics.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::{Domain, Example, LabeledExample, Sequence};
use crate::error::{Error, Result};
use crate::model::{Params, TokenBatch};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 256;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class for every example.
pub fn predict<S: Scalar, T: Sequence>(params: &Params<S>, examples: &[T]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_BATCH) {
        let refs: Vec<&T> = chunk.iter().collect();
        let batch = TokenBatch::unlabeled(&refs, params.config().seq_len)?;
        let logits = params.task_logits(&batch)?;
        out.extend((0..logits.rows()).map(|i| argmax(logits.row(i))));
    }
    Ok(out)
}

/// Fraction of examples whose predicted class equals the label.
pub fn accuracy<S: Scalar>(params: &Params<S>, examples: &[LabeledExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("accuracy over an empty corpus".into()));
    }
    let pred = predict(params, examples)?;
    let correct = pred
        .iter()
        .zip(examples)
        .filter(|(p, e)| **p == e.label)
        .count();
    Ok(correct as f64 / examples.len() as f64)
}

/// Encoder outputs `[N, H]` for a collection.
pub fn hidden_features<S: Scalar, T: Sequence>(
    params: &Params<S>,
    examples: &[T],
) -> Result<Tensor<S>> {
    let h = params.config().hidden_dim;
    let mut data = Vec::with_capacity(examples.len() * h);
    for chunk in examples.chunks(EVAL_BATCH) {
        let refs: Vec<&T> = chunk.iter().collect();
        let batch = TokenBatch::unlabeled(&refs, params.config().seq_len)?;
        data.extend_from_slice(params.hidden(&batch, None)?.data());
    }
    Tensor::new(vec![examples.len(), h], data)
}

/// Settings of the linear domain probe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub max_per_domain: usize,
    pub regularization: f64,
    pub epochs: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            max_per_domain: 2000,
            regularization: 1e-3,
            epochs: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ADistanceReport {
    /// Test error of the domain probe.
    pub error: f64,
    pub a_distance: f64,
    pub train_per_domain: [usize; 2],
    pub test_per_domain: [usize; 2],
    pub split_seed: u64,
}

/// `2(1 − 2ε)`.
pub fn a_distance_from_error(error: f64) -> f64 {
    2.0 * (1.0 - 2.0 * error)
}

/// Trains a hinge-loss linear probe to separate source rows from target rows
/// on one half of the samples and reports its error on the other half.
pub fn a_distance<S: Scalar>(
    source: &Tensor<S>,
    target: &Tensor<S>,
    split_seed: u64,
    cfg: &ProbeConfig,
) -> Result<ADistanceReport> {
    if source.rank() != 2 || target.rank() != 2 || source.shape()[1] != target.shape()[1] {
        return Err(Error::Shape("probe features must be [N, H] with equal H".into()));
    }
    if source.rows() < 2 || target.rows() < 2 {
        return Err(Error::InvalidInput(
            "each domain needs at least two examples".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut train_n = [0; 2];
    let mut test_n = [0; 2];
    for (d, feats) in [source, target].into_iter().enumerate() {
        let mut idx: Vec<usize> = (0..feats.rows()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(cfg.max_per_domain.min(feats.rows()));
        let half = idx.len() / 2;
        let label = if d == 0 { 1.0 } else { -1.0 };
        let row = |i: usize| -> Vec<f64> { feats.row(i).iter().map(|v| v.as_f64()).collect() };
        for &i in &idx[..half] {
            train.push((row(i), label));
        }
        for &i in &idx[half..] {
            test.push((row(i), label));
        }
        train_n[d] = half;
        test_n[d] = idx.len() - half;
    }
    let probe = LinearSvm::fit(&mut train, cfg, &mut rng);
    let wrong = test
        .iter()
        .filter(|(x, y)| probe.decision(x) * y <= 0.0)
        .count();
    let error = wrong as f64 / test.len() as f64;
    Ok(ADistanceReport {
        error,
        a_distance: a_distance_from_error(error),
        train_per_domain: train_n,
        test_per_domain: test_n,
        split_seed,
    })
}

/// Linear classifier on standardized features trained by Pegasos-style
/// stochastic subgradient descent on the l2-regularized hinge loss.
struct LinearSvm {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    w: Vec<f64>,
    b: f64,
}

impl LinearSvm {
    fn fit(data: &mut [(Vec<f64>, f64)], cfg: &ProbeConfig, rng: &mut ChaCha8Rng) -> Self {
        let dim = data[0].0.len();
        let n = data.len() as f64;
        let mut mean = vec![0.0; dim];
        for (x, _) in data.iter() {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for (x, _) in data.iter() {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| if *v > 1e-24 { 1.0 / v.sqrt() } else { 0.0 })
            .collect();
        let mut svm = Self {
            mean,
            inv_std,
            w: vec![0.0; dim],
            b: 0.0,
        };
        for (x, _) in data.iter_mut() {
            *x = svm.standardize(x);
        }
        let reg = cfg.regularization;
        let mut t = 0.0;
        for _ in 0..cfg.epochs {
            data.shuffle(rng);
            for (x, y) in data.iter() {
                t += 1.0;
                let eta = 1.0 / (reg * (t + 1.0 / reg));
                let margin = y * (dot(&svm.w, x) + svm.b);
                for w in svm.w.iter_mut() {
                    *w *= 1.0 - eta * reg;
                }
                if margin < 1.0 {
                    for (w, v) in svm.w.iter_mut().zip(x) {
                        *w += eta * y * v;
                    }
                    svm.b += eta * y;
                }
            }
        }
        svm
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.inv_std)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    fn decision(&self, x: &[f64]) -> f64 {
        dot(&self.w, &self.standardize(x)) + self.b
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One row of an embedding dump.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub domain: Domain,
    pub label: Option<usize>,
    pub hidden: Vec<f64>,
}

/// Writes one tab-separated row per example: domain, label (`-` when
/// absent), then the encoder output.
pub fn dump_embeddings<S: Scalar>(
    params: &Params<S>,
    examples: &[Example],
    path: &Path,
) -> Result<()> {
    let h = hidden_features(params, examples)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (i, e) in examples.iter().enumerate() {
        let mut line = format!("{}\t", e.domain.index());
        match e.label {
            Some(l) => line.push_str(&l.to_string()),
            None => line.push('-'),
        }
        for v in h.row(i) {
            line.push('\t');
            line.push_str(&v.to_string());
        }
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let err = |m: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: m.to_string(),
        };
        let mut fields = line.split('\t');
        let domain = fields
            .next()
            .and_then(|d| d.parse().ok())
            .and_then(Domain::from_index)
            .ok_or_else(|| err("bad domain"))?;
        let label = match fields.next() {
            Some("-") => None,
            Some(l) => Some(l.parse().map_err(|_| err("bad label"))?),
            None => return Err(err("missing label")),
        };
        let hidden = fields
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| err("bad feature value"))?;
        out.push(EmbeddingRecord {
            domain,
            label,
            hidden,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub reference: String,
    pub scores: Vec<f64>,
    pub reference_scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub reference_mean: f64,
    pub reference_std: f64,
    pub mean_difference: f64,
    /// Paired t statistic; `None` when the differences have zero variance.
    pub t_statistic: Option<f64>,
    pub p_value: f64,
    /// Set when the differences have zero variance and `p_value` is forced.
    pub degenerate: bool,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Mean, spread and a two-tailed paired t-test of `scores` against
/// `reference`, paired by position.
pub fn summarize_runs(
    method: &str,
    scores: &[f64],
    reference: &str,
    reference_scores: &[f64],
) -> Result<RunSummary> {
    if scores.len() != reference_scores.len() {
        return Err(Error::InvalidInput("paired score lists differ in length".into()));
    }
    if scores.len() < 2 {
        return Err(Error::InvalidInput("a paired t-test needs at least two pairs".into()));
    }
    let diffs: Vec<f64> = scores.iter().zip(reference_scores).map(|(a, b)| a - b).collect();
    let n = diffs.len() as f64;
    let md = mean(&diffs);
    let sd = sample_std(&diffs);
    let (t_statistic, p_value, degenerate) = if sd == 0.0 {
        (None, if md != 0.0 { 0.0 } else { 1.0 }, true)
    } else {
        let t = md / (sd / n.sqrt());
        let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("valid degrees of freedom");
        (Some(t), 2.0 * (1.0 - dist.cdf(t.abs())), false)
    };
    Ok(RunSummary {
        method: method.to_string(),
        reference: reference.to_string(),
        scores: scores.to_vec(),
        reference_scores: reference_scores.to_vec(),
        mean: mean(scores),
        std: sample_std(scores),
        reference_mean: mean(reference_scores),
        reference_std: sample_std(reference_scores),
        mean_difference: md,
        t_statistic,
        p_value,
        degenerate,
    })
}
