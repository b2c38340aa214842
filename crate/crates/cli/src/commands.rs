use std::path::{Path, PathBuf};

use dccl_core::corpus::{
    generate_corpus, masked_fraction, mask_domain_tokens, Domain, DomainTokenStats, Example,
    GeneratedCorpus, SPLIT_FILES,
};
use dccl_core::eval::{a_distance, accuracy, dump_embeddings, hidden_features, summarize_runs, RunSummary};
use dccl_core::model::Params;
use dccl_core::train::{train, write_metrics, Checkpoint, LabelReads, Method, TrainConfig, TrainingData};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Step};
use crate::run::RunDir;

pub const METRICS: &str = "metrics.jsonl";
pub const CHECKPOINT: &str = "model.ckpt";

/// Held-out or training splits for the domain probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSplits {
    Test,
    Train,
}

fn corpus(cfg: &RunConfig, dir: Option<&Path>) -> Result<GeneratedCorpus, CliError> {
    match dir {
        Some(d) => GeneratedCorpus::load(d).step(format!("loading corpus from {}", d.display())),
        None => generate_corpus(&cfg.corpus).step("generating corpus"),
    }
}

fn corpus_inputs(dir: Option<&Path>) -> Vec<PathBuf> {
    dir.map(|d| SPLIT_FILES.iter().map(|f| d.join(f)).collect())
        .unwrap_or_default()
}

fn load_checkpoint(path: &Path) -> Result<Params<f64>, CliError> {
    Params::load(path).step(format!("loading checkpoint {}", path.display()))
}

fn finish(
    run: &RunDir,
    command: &str,
    cfg: &RunConfig,
    seeds: &[u64],
    methods: &[Method],
    inputs: &[PathBuf],
) -> Result<(), CliError> {
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    run.finish(command, cfg, seeds, methods, &refs)
}

pub fn generate_data(cfg: &RunConfig, run: &RunDir) -> Result<(), CliError> {
    let c = corpus(cfg, None)?;
    c.save(&run.dir("corpus")?).step("writing corpus")?;
    finish(run, "generate-data", cfg, &[cfg.corpus.seed], &[], &[])
}

#[derive(Serialize)]
struct SplitAccuracy {
    source_val: f64,
    source_test: f64,
    target_test: f64,
}

impl SplitAccuracy {
    fn measure(params: &Params<f64>, c: &GeneratedCorpus) -> Result<Self, CliError> {
        let acc = |split: &str, xs| accuracy(params, xs).step(format!("scoring {split}"));
        Ok(Self {
            source_val: acc("source_val", &c.source_val)?,
            source_test: acc("source_test", &c.source_test)?,
            target_test: acc("target_test", &c.target_test)?,
        })
    }
}

#[derive(Serialize)]
struct TrainReport {
    method: Method,
    seed: u64,
    checkpoint: Checkpoint,
    label_reads: LabelReads,
    accuracy: SplitAccuracy,
}

/// Trains one cell and writes its metrics and checkpoint under `prefix`.
fn train_cell(
    run: &RunDir,
    prefix: &str,
    c: &GeneratedCorpus,
    tc: &TrainConfig,
) -> Result<(Params<f64>, TrainReport), CliError> {
    let what = format!("training {} seed {}", tc.method, tc.seed);
    let out = train::<f64>(TrainingData::from_corpus(c), tc).step(&what)?;
    write_metrics(&run.path(&format!("{prefix}{METRICS}"))?, &out.metrics).step(&what)?;
    out.params
        .save(&run.path(&format!("{prefix}{CHECKPOINT}"))?)
        .step(&what)?;
    let report = TrainReport {
        method: tc.method,
        seed: tc.seed,
        checkpoint: out.checkpoint,
        label_reads: out.label_reads,
        accuracy: SplitAccuracy::measure(&out.params, c)?,
    };
    run.write_json(&format!("{prefix}outcome.json"), &report)?;
    Ok((out.params, report))
}

pub fn train_one(cfg: &RunConfig, run: &RunDir, corpus_dir: Option<&Path>) -> Result<(), CliError> {
    let c = corpus(cfg, corpus_dir)?;
    let (_, report) = train_cell(run, "", &c, &cfg.train)?;
    eprintln!(
        "{} seed {}: epoch {} selected, target accuracy {:.4}",
        report.method, report.seed, report.checkpoint.epoch, report.accuracy.target_test
    );
    finish(
        run,
        "train",
        cfg,
        &[cfg.train.seed],
        &[cfg.train.method],
        &corpus_inputs(corpus_dir),
    )
}

#[derive(Serialize)]
struct EvaluationReport {
    checkpoint_sha256: String,
    accuracy: SplitAccuracy,
    examples: [usize; 3],
}

pub fn evaluate(
    cfg: &RunConfig,
    run: &RunDir,
    checkpoint: &Path,
    corpus_dir: Option<&Path>,
    embeddings: bool,
) -> Result<(), CliError> {
    let params = load_checkpoint(checkpoint)?;
    let c = corpus(cfg, corpus_dir)?;
    let report = EvaluationReport {
        checkpoint_sha256: crate::run::sha256_file(checkpoint)?,
        accuracy: SplitAccuracy::measure(&params, &c)?,
        examples: [c.source_val.len(), c.source_test.len(), c.target_test.len()],
    };
    run.write_json("evaluation.json", &report)?;
    if embeddings {
        let rows: Vec<Example> = c
            .source_test
            .iter()
            .chain(&c.target_test)
            .cloned()
            .map(Example::from)
            .collect();
        dump_embeddings(&params, &rows, &run.path("embeddings.tsv")?).step("dumping embeddings")?;
    }
    let mut inputs = vec![checkpoint.to_path_buf()];
    inputs.extend(corpus_inputs(corpus_dir));
    finish(run, "evaluate", cfg, &[], &[], &inputs)
}

#[derive(Serialize)]
struct ADistanceOutput {
    splits: ProbeSplits,
    #[serde(flatten)]
    report: dccl_core::eval::ADistanceReport,
}

fn probe(
    params: &Params<f64>,
    c: &GeneratedCorpus,
    splits: ProbeSplits,
    seed: u64,
    cfg: &RunConfig,
) -> Result<dccl_core::eval::ADistanceReport, CliError> {
    let (hs, ht) = match splits {
        ProbeSplits::Test => (hidden_features(params, &c.source_test), hidden_features(params, &c.target_test)),
        ProbeSplits::Train => (hidden_features(params, &c.source_train), hidden_features(params, &c.target_train)),
    };
    let hs = hs.step("encoding source features")?;
    let ht = ht.step("encoding target features")?;
    a_distance(&hs, &ht, seed, &cfg.probe).step("fitting the domain probe")
}

pub fn a_distance_cmd(
    cfg: &RunConfig,
    run: &RunDir,
    checkpoint: &Path,
    corpus_dir: Option<&Path>,
    splits: ProbeSplits,
) -> Result<(), CliError> {
    let params = load_checkpoint(checkpoint)?;
    let c = corpus(cfg, corpus_dir)?;
    let seed = cfg.train.seed;
    let report = probe(&params, &c, splits, seed, cfg)?;
    eprintln!("d_A = {:.4} (probe error {:.4})", report.a_distance, report.error);
    run.write_json("a_distance.json", &ADistanceOutput { splits, report })?;
    let mut inputs = vec![checkpoint.to_path_buf()];
    inputs.extend(corpus_inputs(corpus_dir));
    finish(run, "a-distance", cfg, &[seed], &[], &inputs)
}

#[derive(Serialize)]
struct TokenRow {
    token: usize,
    source_count: u64,
    target_count: u64,
    source_ratio: f64,
    target_ratio: f64,
    masked_in_source: bool,
    masked_in_target: bool,
}

#[derive(Serialize)]
struct MaskSummary {
    threshold: f64,
    smoothing: f64,
    masked_fraction_source_train: f64,
    masked_fraction_target_train: f64,
    masked_vocabulary_source: usize,
    masked_vocabulary_target: usize,
}

pub fn mask_stats(cfg: &RunConfig, run: &RunDir, corpus_dir: Option<&Path>) -> Result<(), CliError> {
    let c = corpus(cfg, corpus_dir)?;
    let (threshold, smooth) = (cfg.train.mask_threshold, cfg.train.mask_smoothing);
    let stats = DomainTokenStats::from_corpora(cfg.train.model.vocab_size, &c.source_train, &c.target_train, smooth)
        .step("counting tokens")?;
    let masked = |t: usize, d: Domain| mask_domain_tokens(&[t], d, &stats, threshold).1 > 0.0;
    let rows: Vec<TokenRow> = (0..stats.vocab_size())
        .map(|t| TokenRow {
            token: t,
            source_count: stats.count(t, Domain::Source),
            target_count: stats.count(t, Domain::Target),
            source_ratio: stats.frequency_ratio(t, Domain::Source),
            target_ratio: stats.frequency_ratio(t, Domain::Target),
            masked_in_source: masked(t, Domain::Source),
            masked_in_target: masked(t, Domain::Target),
        })
        .collect();
    let summary = MaskSummary {
        threshold,
        smoothing: smooth,
        masked_fraction_source_train: masked_fraction(&c.source_train, &stats, threshold),
        masked_fraction_target_train: masked_fraction(&c.target_train, &stats, threshold),
        masked_vocabulary_source: rows.iter().filter(|r| r.masked_in_source).count(),
        masked_vocabulary_target: rows.iter().filter(|r| r.masked_in_target).count(),
    };
    eprintln!(
        "masked fraction: source {:.4}, target {:.4}",
        summary.masked_fraction_source_train, summary.masked_fraction_target_train
    );
    run.write_csv("token_ratios.csv", &rows)?;
    run.write_json("mask_stats.json", &summary)?;
    finish(run, "mask-stats", cfg, &[], &[], &corpus_inputs(corpus_dir))
}

#[derive(Serialize)]
struct CellRow {
    method: Method,
    seed: u64,
    checkpoint_epoch: usize,
    source_val_error: f64,
    source_test_accuracy: f64,
    target_test_accuracy: f64,
    a_distance: f64,
}

/// Flat form of a [`RunSummary`] for the CSV table.
#[derive(Serialize)]
struct SummaryRow<'a> {
    method: &'a str,
    reference: &'a str,
    n: usize,
    mean: f64,
    std: f64,
    reference_mean: f64,
    reference_std: f64,
    mean_difference: f64,
    t_statistic: Option<f64>,
    p_value: f64,
    degenerate: bool,
}

impl<'a> From<&'a RunSummary> for SummaryRow<'a> {
    fn from(s: &'a RunSummary) -> Self {
        Self {
            method: &s.method,
            reference: &s.reference,
            n: s.scores.len(),
            mean: s.mean,
            std: s.std,
            reference_mean: s.reference_mean,
            reference_std: s.reference_std,
            mean_difference: s.mean_difference,
            t_statistic: s.t_statistic,
            p_value: s.p_value,
            degenerate: s.degenerate,
        }
    }
}

pub fn matrix(cfg: &RunConfig, run: &RunDir, corpus_dir: Option<&Path>) -> Result<(), CliError> {
    let c = corpus(cfg, corpus_dir)?;
    let mut rows = Vec::new();
    for &method in &cfg.methods {
        for &seed in &cfg.seeds {
            let prefix = format!("cells/{method}-s{seed}/");
            let (params, report) = train_cell(run, &prefix, &c, &cfg.cell(method, seed))?;
            let probe = probe(&params, &c, ProbeSplits::Test, seed, cfg)?;
            eprintln!(
                "{method} seed {seed}: target accuracy {:.4}, d_A {:.4}",
                report.accuracy.target_test, probe.a_distance
            );
            rows.push(CellRow {
                method,
                seed,
                checkpoint_epoch: report.checkpoint.epoch,
                source_val_error: report.checkpoint.source_val_error,
                source_test_accuracy: report.accuracy.source_test,
                target_test_accuracy: report.accuracy.target_test,
                a_distance: probe.a_distance,
            });
        }
    }
    run.write_jsonl("results.jsonl", &rows)?;
    run.write_csv("results.csv", &rows)?;

    // percentage points, paired by seed against source_only
    let scores = |m: Method| -> Vec<f64> {
        rows.iter()
            .filter(|r| r.method == m)
            .map(|r| 100.0 * r.target_test_accuracy)
            .collect()
    };
    let mut summaries = Vec::new();
    if cfg.methods.contains(&Method::SourceOnly) && cfg.seeds.len() >= 2 {
        let base = scores(Method::SourceOnly);
        for &m in cfg.methods.iter().filter(|&&m| m != Method::SourceOnly) {
            summaries.push(summarize_runs(m.name(), &scores(m), Method::SourceOnly.name(), &base).step("summarizing runs")?);
        }
    } else {
        eprintln!("no summaries: needs source_only among the methods and at least two seeds");
    }
    for s in &summaries {
        eprintln!(
            "{}: {:.2} ± {:.2} vs {:.2} ± {:.2}, p = {:.3e}",
            s.method, s.mean, s.std, s.reference_mean, s.reference_std, s.p_value
        );
    }
    run.write_jsonl("summaries.jsonl", &summaries)?;
    let flat: Vec<SummaryRow> = summaries.iter().map(SummaryRow::from).collect();
    run.write_csv("summaries.csv", &flat)?;
    finish(run, "matrix", cfg, &cfg.seeds, &cfg.methods, &corpus_inputs(corpus_dir))
}
