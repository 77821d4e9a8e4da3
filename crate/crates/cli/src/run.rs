//! Bookkeeping shared by every command: digests of what was read and
//! written, the run manifest, and the exit-status contract.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// How a command finished when it did not fail outright.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Status {
    Success,
    /// Some items failed; the rest were processed.
    Partial(String),
    /// Inputs were valid but the result violates a constraint.
    Infeasible(String),
}

impl Status {
    pub fn exit_code(&self) -> u8 {
        match self {
            Status::Success => 0,
            Status::Partial(_) => 1,
            Status::Infeasible(_) => 3,
        }
    }
}

/// Exit code for any error that stops a command.
pub const EXIT_INVALID_INPUT: u8 = 2;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct RunContext {
    pub config: PipelineConfig,
    pub out_dir: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl RunContext {
    pub fn new(config: PipelineConfig, out_dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&out_dir)
            .with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(Self {
            config,
            out_dir,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    /// Reads a file and records its digest as an input.
    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs
            .insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    /// Records the digest of a file some library routine reads itself.
    pub fn note_input(&mut self, path: &Path) -> Result<()> {
        self.read(path).map(|_| ())
    }

    /// Writes `bytes` to `name` inside the output directory.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    /// Records a file some library routine wrote into the output directory.
    pub fn note_output(&mut self, name: &str) -> Result<()> {
        let bytes = std::fs::read(self.out_dir.join(name))?;
        self.outputs.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn outputs(&self) -> &BTreeMap<String, String> {
        &self.outputs
    }

    pub fn into_manifest(
        self,
        argv: Vec<String>,
        cwd: PathBuf,
        exit_code: u8,
        wall_time_ms: u128,
    ) -> RunManifest {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            argv,
            cwd,
            config_hash: self.config.hash(),
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            exit_code,
            wall_time_ms,
        }
    }
}

/// Enough to re-run a command and check that it reproduces its outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub argv: Vec<String>,
    pub cwd: PathBuf,
    pub config_hash: String,
    pub config: PipelineConfig,
    /// Input path to SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to the output directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub exit_code: u8,
    pub wall_time_ms: u128,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }
}
