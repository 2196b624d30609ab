//! Config resolution and run manifests shared by every subcommand.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use anyhow::{Context, Result};
use cfdebias::config::KvConfig;
use cfdebias::fsutil::write_atomic;
use cfdebias::Error;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// The `--config` file of this process, hashed into every manifest.
static CONFIG_FILE: OnceLock<PathBuf> = OnceLock::new();

/// `--config` file, then subcommand flags, then `--set` overrides.
pub fn resolve(
    config: Option<&Path>,
    flags: &[(&str, Option<String>)],
    sets: &[String],
) -> Result<KvConfig> {
    let mut cfg = match config {
        Some(p) => {
            let _ = CONFIG_FILE.set(p.to_path_buf());
            KvConfig::load(p)?
        }
        None => KvConfig::default(),
    };
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(*k, v.clone());
        }
    }
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        cfg.set(k.trim(), v.trim());
    }
    Ok(cfg)
}

pub fn required<'a>(cfg: &'a KvConfig, key: &str, flag: &str) -> Result<&'a str> {
    Ok(cfg.get_str(key).filter(|v| !v.is_empty()).ok_or_else(|| {
        Error::Config(format!(
            "missing `{key}` (set it in the config or pass {flag})"
        ))
    })?)
}

pub fn path_of(cfg: &KvConfig, key: &str) -> Option<PathBuf> {
    cfg.get_str(key)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
}

#[derive(Debug, Serialize)]
struct InputHash {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    timestamp: String,
    seed: Option<u64>,
    config: &'a BTreeMap<String, String>,
    inputs: Vec<InputHash>,
    outputs: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Collects inputs to hash; a directory contributes every file in it.
#[derive(Debug, Default)]
pub struct Inputs(Vec<PathBuf>);

impl Inputs {
    pub fn add(&mut self, path: &Path) -> Result<()> {
        if path.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(path)
                .with_context(|| format!("listing {}", path.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            self.0.extend(files);
        } else {
            self.0.push(path.to_path_buf());
        }
        Ok(())
    }
}

/// Everything about one invocation that the manifest records.
pub struct Run<'a> {
    pub command: &'a str,
    pub config: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub inputs: Inputs,
    pub outputs: Vec<PathBuf>,
}

impl<'a> Run<'a> {
    pub fn new(command: &'a str, cfg: &KvConfig) -> Self {
        let mut inputs = Inputs::default();
        if let Some(p) = CONFIG_FILE.get() {
            inputs.0.push(p.clone());
        }
        Self {
            command,
            config: cfg.entries().clone(),
            seed: None,
            inputs,
            outputs: Vec::new(),
        }
    }

    /// Writes `bytes` atomically and records `path` as an output.
    pub fn emit(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        write_atomic(path, bytes)?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    pub fn write_manifest(self, path: &Path) -> Result<()> {
        let inputs = self
            .inputs
            .0
            .iter()
            .map(|p| {
                Ok(InputHash {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let timestamp = time::OffsetDateTime::now_utc()
            .format(&time::format_description::well_known::Rfc3339)
            .unwrap_or_default();
        let m = Manifest {
            command: self.command,
            version: VERSION,
            timestamp,
            seed: self.seed,
            config: &self.config,
            inputs,
            outputs: self
                .outputs
                .iter()
                .map(|p| p.display().to_string())
                .collect(),
        };
        let text = serde_json::to_string_pretty(&m)? + "\n";
        write_atomic(path, text.as_bytes())?;
        Ok(())
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// `<dir>/<stem>.manifest.json` for a file output `<dir>/<stem>.<ext>`.
pub fn manifest_beside(file: &Path) -> PathBuf {
    let stem = file
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    file.with_file_name(format!("{stem}.manifest.json"))
}
