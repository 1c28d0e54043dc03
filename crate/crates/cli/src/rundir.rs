//! Per-invocation output directories and their provenance manifest.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{DateTime, Local};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const OUT_ENV: &str = "SEQCAST_OUT";
const DEFAULT_ROOT: &str = "seqcast-out";

/// Output root: the configured directory, else `$SEQCAST_OUT`, else
/// `./seqcast-out`.
pub fn output_root(cfg: &RunConfig) -> PathBuf {
    cfg.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
    started_at: String,
    finished_at: String,
    argv: Vec<String>,
    config: &'a RunConfig,
    seeds: &'a serde_json::Value,
    inputs: &'a [InputFile],
    outputs: &'a [String],
}

/// A fresh `<root>/<command>-<timestamp>` directory collecting outputs.
pub struct RunDir {
    path: PathBuf,
    command: String,
    started: DateTime<Local>,
    inputs: Vec<InputFile>,
    outputs: Vec<String>,
    seeds: serde_json::Value,
}

impl RunDir {
    pub fn create(cfg: &RunConfig, command: &str) -> Result<Self> {
        let root = output_root(cfg);
        fs::create_dir_all(&root).with_context(|| format!("creating output root {}", root.display()))?;
        let started = Local::now();
        let stem = format!("{command}-{}", started.format("%Y%m%d-%H%M%S-%3f"));
        let mut path = root.join(&stem);
        let mut k = 1;
        // create_dir fails on an existing path, so concurrent invocations
        // never share a directory.
        while let Err(e) = fs::create_dir(&path) {
            if e.kind() != std::io::ErrorKind::AlreadyExists {
                return Err(e).with_context(|| format!("creating {}", path.display()));
            }
            path = root.join(format!("{stem}-{k}"));
            k += 1;
        }
        Ok(Self {
            path,
            command: command.to_string(),
            started,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seeds: serde_json::Value::Null,
        })
    }

    #[cfg(test)]
    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Records an input file and returns its hash.
    pub fn add_input(&mut self, path: &Path) -> Result<String> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(InputFile {
            path: path.display().to_string(),
            sha256: sha256.clone(),
        });
        Ok(sha256)
    }

    pub fn set_seeds(&mut self, seeds: serde_json::Value) {
        self.seeds = seeds;
    }

    /// Absolute path for an output file, creating parent directories.
    pub fn file(&mut self, relative: &str) -> Result<PathBuf> {
        let p = self.path.join(relative);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        self.outputs.push(relative.to_string());
        Ok(p)
    }

    pub fn write(&mut self, relative: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.file(relative)?;
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&mut self, relative: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(relative, text)
    }

    /// Writes `manifest.json`; `error` marks a failed invocation.
    pub fn finish(self, cfg: &RunConfig, error: Option<&str>) -> Result<PathBuf> {
        let manifest = Manifest {
            tool: "seqcast",
            version: env!("CARGO_PKG_VERSION"),
            command: &self.command,
            status: if error.is_some() { "error" } else { "ok" },
            error,
            started_at: self.started.to_rfc3339(),
            finished_at: Local::now().to_rfc3339(),
            argv: std::env::args().collect(),
            config: cfg,
            seeds: &self.seeds,
            inputs: &self.inputs,
            outputs: &self.outputs,
        };
        let p = self.path.join("manifest.json");
        fs::write(&p, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(self.path)
    }
}
