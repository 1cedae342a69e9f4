use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub args: Vec<String>,
    /// SHA-256 of the config text (or of the argument list when there is no config).
    pub config_hash: String,
    pub seed: Option<u64>,
    pub started_utc: String,
    pub finished_utc: String,
    pub inputs: Vec<InputFile>,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn stamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub struct ManifestBuilder {
    command: String,
    args: Vec<String>,
    config_hash: String,
    seed: Option<u64>,
    started: DateTime<Utc>,
    inputs: Vec<InputFile>,
}

impl ManifestBuilder {
    pub fn new(command: &str, config_text: Option<&str>) -> Self {
        let args: Vec<String> = std::env::args().skip(1).collect();
        let config_hash = match config_text {
            Some(text) => sha256_hex(text.as_bytes()),
            None => sha256_hex(args.join("\u{1f}").as_bytes()),
        };
        ManifestBuilder {
            command: command.to_string(),
            args,
            config_hash,
            seed: None,
            started: Utc::now(),
            inputs: Vec::new(),
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        self.inputs.push(InputFile {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn write(self, out: &Path, outputs: &[&str]) -> Result<PathBuf, CliError> {
        let manifest = RunManifest {
            tool: env!("CARGO_BIN_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            args: self.args,
            config_hash: self.config_hash,
            seed: self.seed,
            started_utc: stamp(self.started),
            finished_utc: stamp(Utc::now()),
            inputs: self.inputs,
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        };
        let path = out.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::data(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}
