//! Configuration, persistence, logging and the command-line surface.

mod checkpoint;
pub mod cli;
mod config;
pub mod selftest;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, save_checkpoint, CacheEntry, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{load_config, parse_config, RunConfig, KEYS};

use crate::error::{Error, Result};
use crate::evalharness::{flatness_tsv, FlatnessRecord, FlatnessRow, ProtocolReport};
use crate::flatness::write_spectrum;
use crate::metascheme::{StepTrace, TraceSink, TrainState, Trainer};
use crate::tasksuite::Suite;

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "MCTUEG_OUT";

pub const CHECKPOINT_FILE: &str = "checkpoint.uegc";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Output directory: explicit flag, then the config's `output_dir`, then
/// `$MCTUEG_OUT`, then `./runs`.
pub fn output_root(flag: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    /// SHA-256 of the canonical config text, lowercase hex.
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    /// Canonical config text; parsing it reproduces the run's config.
    pub config: String,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig, seeds: Vec<u64>) -> Self {
        let text = cfg.to_text();
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_sha256: config_hash(&text),
            seeds,
            config: text,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        write_file(&dir.join(MANIFEST_FILE), &text)
    }
}

pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Appends one JSON object per [`StepTrace`] to a file.
pub struct JsonlTrace {
    out: BufWriter<File>,
    path: PathBuf,
}

impl JsonlTrace {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(f),
            path: path.to_path_buf(),
        })
    }

    /// Opens an existing stream for continuation after `iteration`
    /// records: later records (written after the checkpoint) are dropped.
    /// Kept lines are copied verbatim, not re-serialized.
    pub fn resume(path: &Path, iteration: u64) -> Result<Self> {
        let mut kept = String::new();
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                if parse_trace_line(line, i)?.iteration < iteration {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
        let mut sink = Self::create(path)?;
        sink.out.write_all(kept.as_bytes()).map_err(|e| Error::io(path, e))?;
        Ok(sink)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl TraceSink for JsonlTrace {
    fn record(&mut self, trace: &StepTrace) -> Result<()> {
        serde_json::to_writer(&mut self.out, trace)
            .map_err(|e| Error::io(&self.path, e.into()))?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }
}

fn parse_trace_line(line: &str, index: usize) -> Result<StepTrace> {
    serde_json::from_str(line).map_err(|e| Error::Parse {
        line: index + 1,
        key: "trace".into(),
        message: e.to_string(),
    })
}

pub fn read_trace(path: &Path) -> Result<Vec<StepTrace>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_trace_line(&line, i)?);
    }
    Ok(out)
}

/// Trains (or resumes) in `dir`, writing a checkpoint after every cycle,
/// the trace stream and a manifest.
pub fn run_training(suite: &Suite, cfg: &RunConfig, dir: &Path, resume: Option<&Path>) -> Result<TrainState> {
    create_dir(dir)?;
    Manifest::new("train", cfg, vec![cfg.train.seed]).write(dir)?;
    let trainer = Trainer::new(suite, cfg.train.clone())?;
    let trace_path = dir.join(TRACE_FILE);
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let (mut state, mut sink) = match resume {
        Some(p) => {
            let state = load_checkpoint(p)?.restore(&trainer)?;
            let sink = JsonlTrace::resume(&trace_path, state.iteration)?;
            (state, sink)
        }
        None => (trainer.init_state()?, JsonlTrace::create(&trace_path)?),
    };
    save_checkpoint(&state, &ckpt_path)?;
    while (state.cycle as usize) < cfg.train.cycles {
        trainer.run_cycle(&mut state, &mut sink)?;
        sink.flush()?;
        save_checkpoint(&state, &ckpt_path)?;
    }
    sink.flush()?;
    Ok(state)
}

/// `report.tsv`, `report.jsonl` and one `per_method/<method>.tsv` each.
pub fn write_report(dir: &Path, report: &ProtocolReport) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join("report.tsv"), &report.to_tsv())?;
    write_file(&dir.join("report.jsonl"), &report.to_jsonl())?;
    let per = dir.join("per_method");
    create_dir(&per)?;
    for (method, text) in report.per_method() {
        write_file(&per.join(format!("{method}.tsv")), &text)?;
    }
    Ok(())
}

/// `flatness.tsv` plus `spectra/<task>_<method>_seed<seed>.tsv`.
pub fn write_flatness(dir: &Path, records: &[FlatnessRecord], rows: &[FlatnessRow]) -> Result<()> {
    let spectra = dir.join("spectra");
    create_dir(&spectra)?;
    write_file(&dir.join("flatness.tsv"), &flatness_tsv(rows))?;
    for r in records {
        let path = spectra.join(format!("{}_{}_seed{}.tsv", r.profile.task, r.method, r.seed));
        let mut buf = Vec::new();
        write_spectrum(&r.profile.spectrum, &mut buf).map_err(|e| Error::io(&path, e))?;
        std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
