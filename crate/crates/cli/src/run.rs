//! Run directories and their manifest of content hashes.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const RUN_DIR_ENV: &str = "UACAL_RUN_DIR";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub deterministic: bool,
    pub artifacts: Vec<Artifact>,
}

pub struct RunDir {
    path: PathBuf,
    artifacts: Vec<Artifact>,
}

/// `<root>/<UTC timestamp>-seed<seed>-<command>`, with a numeric suffix if
/// that name is taken. `root` is `UACAL_RUN_DIR`, else `runs`.
pub fn default_path(command: &str, seed: u64) -> PathBuf {
    let root = std::env::var_os(RUN_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{stamp}-seed{seed}-{command}");
    let mut path = root.join(&base);
    let mut n = 2;
    while path.exists() {
        path = root.join(format!("{base}-{n}"));
        n += 1;
    }
    path
}

impl RunDir {
    /// Creates `path`, which must not exist or be an empty directory.
    pub fn create(path: PathBuf) -> Result<Self> {
        if path.exists() && fs::read_dir(&path)?.next().is_some() {
            return Err(CliError::usage(format!("run directory {} is not empty", path.display())).into());
        }
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(RunDir { path, artifacts: Vec::new() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Writes `bytes` to `name` and records it.
    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.join(name);
        fs::write(&path, bytes.as_ref()).with_context(|| format!("writing {}", path.display()))?;
        self.record(name)?;
        Ok(path)
    }

    pub fn write_jsonl<T: Serialize>(&mut self, name: &str, records: &[T]) -> Result<PathBuf> {
        let mut out = String::new();
        for r in records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        self.write(name, out)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    /// Records a file some other writer already put in the directory.
    pub fn record(&mut self, name: &str) -> Result<()> {
        let path = self.join(name);
        let bytes = fs::read(&path).with_context(|| format!("hashing {}", path.display()))?;
        self.artifacts.retain(|a| a.path != name);
        self.artifacts.push(Artifact {
            path: name.to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    /// Re-hashes every recorded artifact, then writes the manifest.
    pub fn finish(mut self, command: &str, seed: u64, deterministic: bool) -> Result<Manifest> {
        for a in &self.artifacts {
            let bytes = fs::read(self.path.join(&a.path))?;
            if hex::encode(Sha256::digest(&bytes)) != a.sha256 {
                return Err(CliError::invalid_output(format!("{} changed after it was written", a.path)).into());
            }
        }
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest { command: command.to_string(), seed, deterministic, artifacts: self.artifacts };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.path.join(MANIFEST), text)?;
        Ok(manifest)
    }
}

/// Records of a JSONL file; a malformed line is reported with its number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| CliError::missing(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| uacal::Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::missing(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| uacal::Error::Parse { path: path.to_path_buf(), line: e.line(), message: e.to_string() }.into())
}
