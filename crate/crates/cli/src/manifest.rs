use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// Input path to SHA-256 digest.
    pub inputs: BTreeMap<String, String>,
    /// Output path to SHA-256 digest.
    pub outputs: BTreeMap<String, String>,
    pub summary: serde_json::Value,
    pub wall_clock_seconds: f64,
    pub version: String,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub(crate) struct ManifestBuilder {
    command: &'static str,
    started: Instant,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    summary: serde_json::Value,
}

impl ManifestBuilder {
    pub(crate) fn new(command: &'static str) -> Self {
        Self {
            command,
            started: Instant::now(),
            config: serde_json::Value::Null,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            summary: serde_json::Value::Null,
        }
    }

    pub(crate) fn config(&mut self, c: impl Serialize) -> &mut Self {
        self.config = serde_json::to_value(c).unwrap_or(serde_json::Value::Null);
        self
    }

    pub(crate) fn seed(&mut self, seed: u64) -> &mut Self {
        self.seed = Some(seed);
        self
    }

    pub(crate) fn input(&mut self, p: &Path) -> &mut Self {
        self.inputs.push(p.to_path_buf());
        self
    }

    pub(crate) fn output(&mut self, p: &Path) -> &mut Self {
        self.outputs.push(p.to_path_buf());
        self
    }

    pub(crate) fn summary(&mut self, s: serde_json::Value) -> &mut Self {
        self.summary = s;
        self
    }

    fn digests(paths: &[PathBuf]) -> Result<BTreeMap<String, String>, CliError> {
        paths.iter().map(|p| Ok((p.display().to_string(), sha256_file(p)?))).collect()
    }

    /// Writes the manifest to `path` and returns it.
    pub(crate) fn write(&self, path: &Path) -> Result<RunManifest, CliError> {
        let m = RunManifest {
            command: self.command.to_owned(),
            config: self.config.clone(),
            seed: self.seed,
            inputs: Self::digests(&self.inputs)?,
            outputs: Self::digests(&self.outputs)?,
            summary: self.summary.clone(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            version: icenode::training::VERSION.to_owned(),
        };
        let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::io(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))?;
        Ok(m)
    }
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
