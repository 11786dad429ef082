//! Run manifests: what ran, with which settings, on which files.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::Run;

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    /// SHA-256 of the effective settings serialized as JSON.
    pub config_digest: String,
    pub config: Value,
    pub config_file: Option<PathBuf>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_time_s: f64,
    pub threads: usize,
    pub details: Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> anyhow::Result<FileDigest> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(FileDigest { path: path.to_path_buf(), sha256: sha256_hex(&bytes) })
}

/// Collects inputs and outputs while a command runs.
pub struct Recorder {
    start: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn start() -> Self {
        Self { start: Instant::now(), inputs: Vec::new(), outputs: Vec::new() }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Writes the manifest to the `--manifest` path, else next to the first
    /// output as `<output>.manifest.json`. Commands without outputs and
    /// without `--manifest` write none.
    pub fn finish<A: Serialize>(
        self,
        run: &Run,
        args: &A,
        seed: Option<u64>,
        details: Value,
    ) -> anyhow::Result<Option<PathBuf>> {
        let target = match (&run.manifest, self.outputs.first()) {
            (Some(p), _) => p.clone(),
            (None, Some(out)) => default_manifest_path(out),
            (None, None) => return Ok(None),
        };
        let config = serde_json::to_value(args)?;
        let manifest = RunManifest {
            command: run.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_digest: sha256_hex(serde_json::to_string(&config)?.as_bytes()),
            config,
            config_file: run.config.clone(),
            inputs: self.inputs.iter().map(|p| digest_file(p)).collect::<anyhow::Result<_>>()?,
            outputs: self.outputs.iter().map(|p| digest_file(p)).collect::<anyhow::Result<_>>()?,
            wall_time_s: self.start.elapsed().as_secs_f64(),
            threads: run.threads,
            details,
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&target, text + "\n").map_err(|e| io_error(&target, e))?;
        Ok(Some(target))
    }
}

pub fn default_manifest_path(output: &Path) -> PathBuf {
    if output.is_dir() {
        return output.join("manifest.json");
    }
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

pub fn io_error(path: &Path, e: std::io::Error) -> anyhow::Error {
    anyhow::Error::new(e).context(format!("writing {}", path.display()))
}
