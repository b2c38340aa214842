//! Run configuration: one TOML file layered over a named preset.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dccl_core::corpus::CorpusSpec;
use dccl_core::eval::ProbeConfig;
use dccl_core::train::{Method, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Tuned for a single CPU core; what the test suites use.
    #[default]
    Desk,
    /// Same as `desk` but with a peak learning rate of 1e-5, the value used for large pretrained encoders.
    Paper,
}

impl Preset {
    fn overrides(self) -> toml::Table {
        match self {
            Preset::Desk => toml::Table::new(),
            Preset::Paper => toml::toml! {
                [train]
                learning_rate = 1e-5
            },
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(format!("unknown preset `{other}` (expected desk or paper)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Preset,
    /// Run directory; `--out` wins over this.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub corpus: CorpusSpec,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            out: None,
            seeds: vec![0, 1, 2, 3, 4],
            methods: Method::ALL.to_vec(),
            corpus: CorpusSpec::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub method: Option<Method>,
}

impl RunConfig {
    /// Defaults, then the preset, then the file. Unknown keys anywhere are
    /// rejected by name.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let preset = match (overrides.preset, file.get("preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => v
                .as_str()
                .ok_or_else(|| CliError::Config("`preset` must be a string".into()))?
                .parse()
                .map_err(CliError::Config)?,
            (None, None) => Preset::Desk,
        };
        let mut merged = preset.overrides();
        merge(&mut merged, file);
        merged.insert("preset".into(), toml::Value::String(preset.to_string()));
        let mut cfg: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(describe(path, &e)))?;
        if let Some(seed) = overrides.seed {
            cfg.seeds = vec![seed];
            cfg.train.seed = seed;
        }
        if let Some(method) = overrides.method {
            cfg.methods = vec![method];
            cfg.train.method = method;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("`seeds` is empty".into()));
        }
        if self.methods.is_empty() {
            return Err(CliError::Config("`methods` is empty".into()));
        }
        self.train
            .validate()
            .map_err(|e| CliError::Config(format!("[train]: {e}")))?;
        self.corpus
            .validate()
            .map_err(|e| CliError::Config(format!("[corpus]: {e}")))?;
        if self.corpus.vocab_size > self.train.model.vocab_size {
            return Err(CliError::Config(format!(
                "corpus vocabulary ({}) exceeds model vocabulary ({})",
                self.corpus.vocab_size, self.train.model.vocab_size
            )));
        }
        Ok(())
    }

    /// Training configuration for one cell of the grid.
    pub fn cell(&self, method: Method, seed: u64) -> TrainConfig {
        TrainConfig {
            method,
            seed,
            ..self.train.clone()
        }
    }

    /// Canonical JSON of everything that determines the artifacts (the
    /// output location is excluded).
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("out");
        serde_json::to_string(&v).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        toml::to_string(&c).expect("config serializes")
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn describe(path: Option<&Path>, e: &toml::de::Error) -> String {
    let msg = e.message().trim();
    match path {
        Some(p) => format!("{}: {msg}", p.display()),
        None => msg.to_string(),
    }
}
