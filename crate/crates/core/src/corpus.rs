//! Synthetic two-domain sentiment corpora.
//!
//! Vocabulary layout (ids are contiguous blocks, in this order):
//!
//! | block | size | role |
//! |---|---|---|
//! | mask | 1 | reserved id `0`, never generated |
//! | filler | `filler` | neutral tokens shared by both domains |
//! | sentiment | `sentiment_per_class × C` | shared polar tokens; the label is their majority polarity |
//! | content | `content_per_domain × 2` | label-independent topic tokens, one block per domain |
//! | spurious | `spurious_per_domain × 2` | domain-private tokens that only occur with one class of their own domain |
//!
//! Source spurious tokens accompany the last class, target spurious tokens
//! accompany class 0. `shift` scales how many of them an example of that
//! class carries relative to its polar-token count; at `shift = 0` both domains
//! share the same label-generating process.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

/// Token id substituted for masked domain-specific tokens.
pub const MASK_TOKEN: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::Source, Domain::Target];

    pub fn index(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Domain::Source),
            1 => Some(Domain::Target),
            _ => None,
        }
    }
}

/// A corpus record as stored on disk. The label is optional.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: Option<usize>,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledExample {
    pub tokens: Vec<usize>,
    pub label: usize,
    pub domain: Domain,
}

/// Training-time target example. It has no label field at all, so no loss
/// can be handed a target label by mistake.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnlabeledExample {
    pub tokens: Vec<usize>,
    pub domain: Domain,
}

pub trait Sequence {
    fn tokens(&self) -> &[usize];
    fn domain(&self) -> Domain;
}

impl Sequence for Example {
    fn tokens(&self) -> &[usize] {
        &self.tokens
    }
    fn domain(&self) -> Domain {
        self.domain
    }
}

impl Sequence for LabeledExample {
    fn tokens(&self) -> &[usize] {
        &self.tokens
    }
    fn domain(&self) -> Domain {
        self.domain
    }
}

impl Sequence for UnlabeledExample {
    fn tokens(&self) -> &[usize] {
        &self.tokens
    }
    fn domain(&self) -> Domain {
        self.domain
    }
}

impl Example {
    pub fn into_labeled(self) -> Option<LabeledExample> {
        Some(LabeledExample {
            label: self.label?,
            tokens: self.tokens,
            domain: self.domain,
        })
    }

    pub fn into_unlabeled(self) -> UnlabeledExample {
        UnlabeledExample {
            tokens: self.tokens,
            domain: self.domain,
        }
    }
}

impl From<LabeledExample> for Example {
    fn from(e: LabeledExample) -> Self {
        Example {
            tokens: e.tokens,
            label: Some(e.label),
            domain: e.domain,
        }
    }
}

impl From<UnlabeledExample> for Example {
    fn from(e: UnlabeledExample) -> Self {
        Example {
            tokens: e.tokens,
            label: None,
            domain: e.domain,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub source_train: usize,
    pub target_train: usize,
    pub source_val: usize,
    pub source_test: usize,
    pub target_test: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub filler: usize,
    pub sentiment_per_class: usize,
    pub content_per_domain: usize,
    pub spurious_per_domain: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of positions holding shared sentiment tokens.
    pub polar_fraction: f64,
    /// Fraction of positions holding domain content tokens.
    pub content_fraction: f64,
    /// Probability a sentiment token carries the example's own polarity.
    pub polarity_agreement: f64,
    /// Spurious-token mass relative to the polar-token count.
    pub shift: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            source_train: 2000,
            target_train: 2000,
            source_val: 400,
            source_test: 400,
            target_test: 1000,
            vocab_size: 200,
            num_classes: 2,
            filler: 40,
            sentiment_per_class: 12,
            content_per_domain: 30,
            spurious_per_domain: 10,
            min_len: 12,
            max_len: 32,
            polar_fraction: 0.3,
            content_fraction: 0.3,
            polarity_agreement: 0.7,
            shift: 0.45,
            seed: 17,
        }
    }
}

/// Id ranges of each vocabulary block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabLayout {
    pub filler: std::ops::Range<usize>,
    pub sentiment: Vec<std::ops::Range<usize>>,
    pub content: [std::ops::Range<usize>; 2],
    pub spurious: [std::ops::Range<usize>; 2],
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("corpus: {m}")));
        if [
            self.source_train,
            self.target_train,
            self.source_val,
            self.source_test,
            self.target_test,
        ]
        .contains(&0)
        {
            return bad("all split sizes must be positive");
        }
        if self.num_classes < 2 {
            return bad("need at least two classes");
        }
        if self.filler == 0 || self.sentiment_per_class == 0 || self.content_per_domain == 0 {
            return bad("filler, sentiment and content blocks must be non-empty");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 0 < min_len <= max_len");
        }
        for (name, v) in [
            ("polar_fraction", self.polar_fraction),
            ("content_fraction", self.content_fraction),
            ("polarity_agreement", self.polarity_agreement),
            ("shift", self.shift),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.polar_fraction + self.content_fraction > 1.0 {
            return bad("polar_fraction + content_fraction exceeds 1");
        }
        if self.shift > 0.0 && self.spurious_per_domain == 0 {
            return bad("shift > 0 needs spurious tokens");
        }
        let needed = self.vocab_needed();
        if needed > self.vocab_size {
            return bad(&format!(
                "vocabulary partitions need {needed} ids, vocab_size is {}",
                self.vocab_size
            ));
        }
        Ok(())
    }

    pub fn vocab_needed(&self) -> usize {
        1 + self.filler
            + self.sentiment_per_class * self.num_classes
            + 2 * self.content_per_domain
            + 2 * self.spurious_per_domain
    }

    pub fn layout(&self) -> VocabLayout {
        let mut next = 1;
        let mut take = |n: usize| {
            let r = next..next + n;
            next += n;
            r
        };
        let filler = take(self.filler);
        let sentiment = (0..self.num_classes)
            .map(|_| take(self.sentiment_per_class))
            .collect();
        let content = [take(self.content_per_domain), take(self.content_per_domain)];
        let spurious = [
            take(self.spurious_per_domain),
            take(self.spurious_per_domain),
        ];
        VocabLayout {
            filler,
            sentiment,
            content,
            spurious,
        }
    }

    /// Class whose examples carry the domain's spurious tokens.
    pub fn spurious_class(&self, domain: Domain) -> usize {
        match domain {
            Domain::Source => self.num_classes - 1,
            Domain::Target => 0,
        }
    }
}

/// All splits of one generated source/target task.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedCorpus {
    pub source_train: Vec<LabeledExample>,
    pub target_train: Vec<UnlabeledExample>,
    pub source_val: Vec<LabeledExample>,
    pub source_test: Vec<LabeledExample>,
    pub target_test: Vec<LabeledExample>,
}

pub const SPLIT_FILES: [&str; 5] = [
    "source_train.jsonl",
    "target_train.jsonl",
    "source_val.jsonl",
    "source_test.jsonl",
    "target_test.jsonl",
];

impl GeneratedCorpus {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let to_examples = |v: &[LabeledExample]| -> Vec<Example> {
            v.iter().cloned().map(Example::from).collect()
        };
        save_corpus(&dir.join(SPLIT_FILES[0]), &to_examples(&self.source_train))?;
        let target: Vec<Example> = self.target_train.iter().cloned().map(Example::from).collect();
        save_corpus(&dir.join(SPLIT_FILES[1]), &target)?;
        save_corpus(&dir.join(SPLIT_FILES[2]), &to_examples(&self.source_val))?;
        save_corpus(&dir.join(SPLIT_FILES[3]), &to_examples(&self.source_test))?;
        save_corpus(&dir.join(SPLIT_FILES[4]), &to_examples(&self.target_test))?;
        Ok(())
    }

    /// Loads the splits written by [`GeneratedCorpus::save`]. Labels found in
    /// the target training file are dropped.
    pub fn load(dir: &Path) -> Result<Self> {
        let labeled = |name: &str, domain: Domain| -> Result<Vec<LabeledExample>> {
            let path = dir.join(name);
            load_corpus(&path)?
                .into_iter()
                .enumerate()
                .map(|(i, e)| {
                    if e.domain != domain {
                        return Err(Error::Parse {
                            path: path.clone(),
                            line: i + 1,
                            message: format!("expected domain {}", domain.index()),
                        });
                    }
                    e.into_labeled().ok_or_else(|| Error::Parse {
                        path: path.clone(),
                        line: i + 1,
                        message: "missing label".into(),
                    })
                })
                .collect()
        };
        let target_train = load_corpus(&dir.join(SPLIT_FILES[1]))?
            .into_iter()
            .map(Example::into_unlabeled)
            .collect();
        Ok(Self {
            source_train: labeled(SPLIT_FILES[0], Domain::Source)?,
            target_train,
            source_val: labeled(SPLIT_FILES[2], Domain::Source)?,
            source_test: labeled(SPLIT_FILES[3], Domain::Source)?,
            target_test: labeled(SPLIT_FILES[4], Domain::Target)?,
        })
    }
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<GeneratedCorpus> {
    spec.validate()?;
    let layout = spec.layout();
    let split = |size: usize, domain: Domain, s: Stream| {
        generate_split(spec, &layout, size, domain, &mut stream(spec.seed, s))
    };
    Ok(GeneratedCorpus {
        source_train: split(spec.source_train, Domain::Source, Stream::SourceTrain),
        target_train: split(spec.target_train, Domain::Target, Stream::TargetTrain)
            .into_iter()
            .map(|e| UnlabeledExample {
                tokens: e.tokens,
                domain: e.domain,
            })
            .collect(),
        source_val: split(spec.source_val, Domain::Source, Stream::SourceVal),
        source_test: split(spec.source_test, Domain::Source, Stream::SourceTest),
        target_test: split(spec.target_test, Domain::Target, Stream::TargetTest),
    })
}

fn generate_split(
    spec: &CorpusSpec,
    layout: &VocabLayout,
    size: usize,
    domain: Domain,
    rng: &mut impl Rng,
) -> Vec<LabeledExample> {
    let mut out: Vec<LabeledExample> = (0..size)
        .map(|i| {
            let label = i % spec.num_classes;
            LabeledExample {
                tokens: generate_tokens(spec, layout, label, domain, rng),
                label,
                domain,
            }
        })
        .collect();
    out.shuffle(rng);
    out
}

fn generate_tokens(
    spec: &CorpusSpec,
    layout: &VocabLayout,
    label: usize,
    domain: Domain,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let len = rng.random_range(spec.min_len..=spec.max_len);
    let polar = ((len as f64 * spec.polar_fraction).round() as usize).clamp(1, len);
    let content = ((len as f64 * spec.content_fraction).round() as usize).min(len - polar);
    let mut filler = len - polar - content;

    // Polarities of the shared sentiment tokens; `label` must be the strict plurality.
    let polarities = loop {
        let draw: Vec<usize> = (0..polar)
            .map(|_| {
                if rng.random_bool(spec.polarity_agreement) {
                    label
                } else {
                    let other = rng.random_range(0..spec.num_classes - 1);
                    if other >= label {
                        other + 1
                    } else {
                        other
                    }
                }
            })
            .collect();
        if strict_plurality(&draw, spec.num_classes) == Some(label) {
            break draw;
        }
    };

    let mut tokens = Vec::with_capacity(len);
    for p in polarities {
        tokens.push(rng.random_range(layout.sentiment[p].clone()));
    }
    let d = domain.index();
    if label == spec.spurious_class(domain) && spec.shift > 0.0 {
        let spurious = (0..polar)
            .filter(|_| rng.random_bool(spec.shift))
            .count()
            .min(filler);
        filler -= spurious;
        for _ in 0..spurious {
            tokens.push(rng.random_range(layout.spurious[d].clone()));
        }
    }
    for _ in 0..content {
        tokens.push(rng.random_range(layout.content[d].clone()));
    }
    for _ in 0..filler {
        tokens.push(rng.random_range(layout.filler.clone()));
    }
    tokens.shuffle(rng);
    tokens
}

fn strict_plurality(polarities: &[usize], num_classes: usize) -> Option<usize> {
    let mut counts = vec![0usize; num_classes];
    for &p in polarities {
        counts[p] += 1;
    }
    let max = *counts.iter().max()?;
    let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == max);
    let (first, _) = winners.next()?;
    winners.next().is_none().then_some(first)
}

/// Per-domain token counts for frequency-ratio scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainTokenStats {
    counts: [Vec<u64>; 2],
    pub smooth_add: f64,
}

impl DomainTokenStats {
    pub fn from_corpora<A: Sequence, B: Sequence>(
        vocab_size: usize,
        source: &[A],
        target: &[B],
        smooth_add: f64,
    ) -> Result<Self> {
        if smooth_add <= 0.0 {
            return Err(Error::InvalidConfig("smoothing must be positive".into()));
        }
        let mut counts = [vec![0u64; vocab_size], vec![0u64; vocab_size]];
        let mut add = |seq: &dyn Sequence| -> Result<()> {
            let c = &mut counts[seq.domain().index()];
            for &t in seq.tokens() {
                *c.get_mut(t).ok_or(Error::OutOfVocabulary { id: t, vocab_size })? += 1;
            }
            Ok(())
        };
        for s in source {
            add(s)?;
        }
        for t in target {
            add(t)?;
        }
        Ok(Self { counts, smooth_add })
    }

    pub fn count(&self, token: usize, domain: Domain) -> u64 {
        self.counts[domain.index()].get(token).copied().unwrap_or(0)
    }

    /// `(count(u, d) + s) / (Σ_{d' ≠ d} count(u, d') + s)`.
    pub fn frequency_ratio(&self, token: usize, domain: Domain) -> f64 {
        let own = self.count(token, domain) as f64;
        let others: u64 = Domain::ALL
            .iter()
            .filter(|&&o| o != domain)
            .map(|&o| self.count(token, o))
            .sum();
        (own + self.smooth_add) / (others as f64 + self.smooth_add)
    }

    pub fn vocab_size(&self) -> usize {
        self.counts[0].len()
    }
}

/// Replaces every token scoring strictly above `threshold` in its own domain
/// with [`MASK_TOKEN`]. Returns the masked tokens and the masked fraction.
pub fn mask_domain_tokens(
    tokens: &[usize],
    domain: Domain,
    stats: &DomainTokenStats,
    threshold: f64,
) -> (Vec<usize>, f64) {
    let mut masked = 0usize;
    let out: Vec<usize> = tokens
        .iter()
        .map(|&t| {
            if stats.frequency_ratio(t, domain) > threshold {
                masked += 1;
                MASK_TOKEN
            } else {
                t
            }
        })
        .collect();
    let fraction = if tokens.is_empty() {
        0.0
    } else {
        masked as f64 / tokens.len() as f64
    };
    (out, fraction)
}

/// Masked tokens over all tokens of a collection.
pub fn masked_fraction<T: Sequence>(examples: &[T], stats: &DomainTokenStats, threshold: f64) -> f64 {
    let (mut masked, mut total) = (0.0, 0usize);
    for e in examples {
        let (_, f) = mask_domain_tokens(e.tokens(), e.domain(), stats, threshold);
        masked += f * e.tokens().len() as f64;
        total += e.tokens().len();
    }
    if total == 0 {
        0.0
    } else {
        masked / total as f64
    }
}

/// Shuffled, single-domain index batches of exactly `batch_size`; the short
/// tail is dropped.
pub fn make_batches<T: Sequence>(
    examples: &[T],
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::InvalidConfig("batch size must be at least 2".into()));
    }
    if examples.len() < batch_size {
        return Err(Error::InvalidInput(format!(
            "{} examples cannot fill a batch of {batch_size}",
            examples.len()
        )));
    }
    let domain = examples[0].domain();
    if examples.iter().any(|e| e.domain() != domain) {
        return Err(Error::MixedDomain);
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    Ok(order
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    tokens: Vec<usize>,
    #[serde(default)]
    y: Option<usize>,
    d: u8,
}

/// Writes one JSON record per line: `{"tokens":[..],"y":1|null,"d":0|1}`.
pub fn save_corpus(path: &Path, examples: &[Example]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in examples {
        let rec = Record {
            tokens: e.tokens.clone(),
            y: e.label,
            d: e.domain.index() as u8,
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: &Path) -> Result<Vec<Example>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let domain = Domain::from_index(rec.d as usize)
            .ok_or_else(|| parse_err(format!("domain must be 0 or 1, got {}", rec.d)))?;
        out.push(Example {
            tokens: rec.tokens,
            label: rec.y,
            domain,
        });
    }
    Ok(out)
}
