//! Configuration-driven runs of the hallkit pipeline: model build, Kubo
//! traces, τ and λ sweeps, the Nenciu expansion and diagnostics, written as
//! CSV tables, JSON summaries, optional SVG plots and a manifest that echoes
//! the resolved configuration.

pub mod config;
pub mod plot;
mod stages;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::RunConfig;
pub use hallkit::fit::{loglog_fit, FitResult, WindowPolicy};
pub use stages::execute;

pub const SCHEMA_VERSION: u32 = 1;

/// Directory holding cached eigensystems; caching is off when unset.
pub const CACHE_ENV: &str = "HALLKIT_CACHE_DIR";

pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const NO_GAP: i32 = 3;
    pub const CHECK_FAILED: i32 = 4;
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] hallkit::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => exit::CONFIG,
            HarnessError::Core(hallkit::Error::NoGap { .. }) => exit::NO_GAP,
            _ => exit::FAILURE,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Build,
    Kubo,
    Evolve,
    SweepTau,
    SweepLambda,
    Expansion,
    Diagnostics,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Build => "build",
            Command::Kubo => "kubo",
            Command::Evolve => "evolve",
            Command::SweepTau => "sweep-tau",
            Command::SweepLambda => "sweep-lambda",
            Command::Expansion => "expansion",
            Command::Diagnostics => "diagnostics",
            Command::Report => "report",
        }
    }
}

/// A named pass/fail outcome with the measured value and the bound it was held to.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub bound: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, value: f64, bound: impl Into<String>) -> Check {
        Check { name: name.into(), passed, value, bound: bound.into() }
    }
}

/// Everything a run produces, held in memory until it is written.
#[derive(Debug, Default)]
pub struct RunOutput {
    pub command: Option<Command>,
    pub model_hash: String,
    pub files: BTreeMap<String, Vec<u8>>,
    pub checks: Vec<Check>,
    pub results: BTreeMap<String, Value>,
}

impl RunOutput {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            exit::OK
        } else {
            exit::CHECK_FAILED
        }
    }

    pub fn summary(&self) -> Value {
        json!({
            "schema_version": SCHEMA_VERSION,
            "command": self.command.map(Command::name),
            "model_hash": self.model_hash,
            "passed": self.passed(),
            "checks": self.checks,
            "results": self.results,
        })
    }

    fn manifest(&self, cfg: &RunConfig) -> Result<Value, HarnessError> {
        let files: Vec<Value> = self
            .files
            .iter()
            .map(|(name, bytes)| json!({ "name": name, "bytes": bytes.len(), "sha256": hex(&Sha256::digest(bytes)) }))
            .collect();
        Ok(json!({
            "schema_version": SCHEMA_VERSION,
            "tool": "hallkit",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command.map(Command::name),
            "seed": cfg.seed,
            "model_hash": self.model_hash,
            "config": serde_json::to_value(cfg)?,
            "files": files,
        }))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes the files of `out`, `summary.json` and `manifest.json` into `dir`.
/// Each file goes through a temporary name so readers never see a partial table.
pub fn write_outputs(dir: &Path, cfg: &RunConfig, out: &RunOutput) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    let mut all: BTreeMap<String, Vec<u8>> = out.files.clone();
    all.insert("summary.json".into(), pretty(&out.summary())?);
    all.insert("manifest.json".into(), pretty(&out.manifest(cfg)?)?);
    for (name, bytes) in &all {
        let path = dir.join(name);
        let tmp = dir.join(format!(".{name}.tmp"));
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, &path)?;
    }
    Ok(())
}

fn pretty(v: &Value) -> Result<Vec<u8>, HarnessError> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    Ok(s)
}

/// Executes `command` and writes its artifacts; nothing is written when the
/// pipeline fails before completion.
pub fn run(command: Command, cfg: &RunConfig, dir: &Path) -> Result<RunOutput, HarnessError> {
    let out = execute(command, cfg)?;
    write_outputs(dir, cfg, &out)?;
    Ok(out)
}
