//! The run directory: the only place a command writes to.

use std::fs;
use std::path::{Component, Path, PathBuf};

use dccl_core::train::Method;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Step};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_COPY: &str = "config.toml";

pub struct RunDir {
    root: PathBuf,
}

#[derive(Debug, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub preset: String,
    pub config_sha256: String,
    pub seeds: &'a [u64],
    pub methods: Vec<&'static str>,
    /// Files this command read from outside the run directory.
    pub inputs: Vec<FileEntry>,
    pub files: Vec<FileEntry>,
}

impl RunDir {
    /// Creates `root`; an existing non-empty directory is refused so stale
    /// files never end up in a manifest.
    pub fn create(root: PathBuf) -> Result<Self, CliError> {
        if root.exists() {
            let occupied = fs::read_dir(&root)
                .step(format!("reading {}", root.display()))?
                .next()
                .is_some();
            if occupied {
                return Err(CliError::Config(format!(
                    "run directory {} already exists and is not empty (pick another --out)",
                    root.display()
                )));
            }
        }
        fs::create_dir_all(&root).step(format!("creating {}", root.display()))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Absolute path of `rel` inside the run directory, creating parents.
    pub fn path(&self, rel: &str) -> Result<PathBuf, CliError> {
        let rel_path = Path::new(rel);
        assert!(
            rel_path.components().all(|c| matches!(c, Component::Normal(_))),
            "run-relative path escapes the run directory: {rel}"
        );
        let p = self.root.join(rel_path);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).step(format!("creating {}", parent.display()))?;
        }
        Ok(p)
    }

    pub fn dir(&self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.path(rel)?;
        fs::create_dir_all(&p).step(format!("creating {}", p.display()))?;
        Ok(p)
    }

    pub fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let p = self.path(rel)?;
        fs::write(&p, contents).step(format!("writing {}", p.display()))?;
        Ok(p)
    }

    pub fn write_json(&self, rel: &str, value: &impl Serialize) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value).step(format!("serializing {rel}"))?;
        text.push('\n');
        self.write(rel, text)
    }

    pub fn write_jsonl<T: Serialize>(&self, rel: &str, rows: &[T]) -> Result<PathBuf, CliError> {
        let mut text = String::new();
        for r in rows {
            text.push_str(&serde_json::to_string(r).step(format!("serializing {rel}"))?);
            text.push('\n');
        }
        self.write(rel, text)
    }

    pub fn write_csv<T: Serialize>(&self, rel: &str, rows: &[T]) -> Result<PathBuf, CliError> {
        let p = self.path(rel)?;
        let mut w = csv::Writer::from_path(&p).step(format!("writing {}", p.display()))?;
        for r in rows {
            w.serialize(r).step(format!("writing {}", p.display()))?;
        }
        w.flush().step(format!("writing {}", p.display()))?;
        Ok(p)
    }

    /// Copies the resolved config in and writes the manifest over every
    /// file now in the directory.
    pub fn finish(
        &self,
        command: &str,
        cfg: &RunConfig,
        seeds: &[u64],
        methods: &[Method],
        inputs: &[&Path],
    ) -> Result<(), CliError> {
        self.write(CONFIG_COPY, cfg.to_toml())?;
        let mut files = Vec::new();
        collect(&self.root, &self.root, &mut files)?;
        files.retain(|f| f.path != MANIFEST);
        let inputs = inputs
            .iter()
            .map(|p| entry(p, p.display().to_string()))
            .collect::<Result<_, _>>()?;
        let manifest = Manifest {
            command,
            preset: cfg.preset.to_string(),
            config_sha256: cfg.hash(),
            seeds,
            methods: methods.iter().map(|m| m.name()).collect(),
            inputs,
            files,
        };
        self.write_json(MANIFEST, &manifest)?;
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).step(format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn entry(path: &Path, name: String) -> Result<FileEntry, CliError> {
    let bytes = fs::metadata(path).step(format!("reading {}", path.display()))?.len();
    Ok(FileEntry {
        path: name,
        bytes,
        sha256: sha256_file(path)?,
    })
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<FileEntry>) -> Result<(), CliError> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .step(format!("reading {}", dir.display()))?
        .collect::<Result<_, _>>()
        .step(format!("reading {}", dir.display()))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("inside root");
            let name = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            out.push(entry(&p, name)?);
        }
    }
    Ok(())
}
