//! Provenance record written next to every command output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub flags: serde_json::Value,
    /// Path → SHA-256 of every input file.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub tool_version: String,
    pub duration_secs: f64,
}

pub struct ManifestBuilder {
    command: &'static str,
    flags: serde_json::Value,
    inputs: Vec<PathBuf>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &'static str, flags: &impl Serialize) -> Result<Self> {
        Ok(Self {
            command,
            flags: serde_json::to_value(flags)?,
            inputs: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) {
        self.inputs.push(path.into());
    }

    /// Hashes inputs and outputs and writes the manifest to `dest`.
    pub fn finish(self, outputs: &[&Path], dest: &Path) -> Result<()> {
        let digest_map = |paths: &mut dyn Iterator<Item = &Path>| -> Result<BTreeMap<String, String>> {
            paths
                .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
                .collect()
        };
        let manifest = RunManifest {
            command: self.command.to_string(),
            flags: self.flags,
            inputs: digest_map(&mut self.inputs.iter().map(PathBuf::as_path))?,
            outputs: digest_map(&mut outputs.iter().copied())?,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(dest, text).with_context(|| format!("writing {}", dest.display()))
    }
}

/// `<path>.manifest.json`
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
