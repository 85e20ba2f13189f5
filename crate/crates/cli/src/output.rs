//! Staged output directory, CSV tables and the JSON manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use fbsde_core::columnar::real;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// One CSV cell.
#[derive(Debug, Clone)]
pub enum Cell {
    Real(f64),
    Int(u64),
    Text(String),
    Bool(bool),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Real(v) => real(*v),
            Cell::Int(i) => i.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Bool(b) => b.to_string(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Real(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Assertion {
    pub name: String,
    pub measured: f64,
    pub required: f64,
    /// How `measured` is compared with `required`, e.g. `<=`.
    pub relation: String,
    pub passed: bool,
}

#[derive(Serialize)]
struct Manifest<'a> {
    subcommand: &'a str,
    config: &'a serde_json::Value,
    seed_root: u64,
    seeds: &'a BTreeMap<String, u64>,
    files: &'a [FileEntry],
    assertions: &'a [Assertion],
    passed: bool,
    notes: &'a [String],
}

/// Output files of one run, written to a staging directory and moved into
/// place only once everything succeeded.
pub struct Run {
    pub subcommand: String,
    staging: PathBuf,
    target: PathBuf,
    files: Vec<FileEntry>,
    pub seeds: BTreeMap<String, u64>,
    pub assertions: Vec<Assertion>,
    pub notes: Vec<String>,
    log: Vec<String>,
    verbose: bool,
}

fn timestamp() -> String {
    let d = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .unwrap_or_default();
    format!("{}.{:03}", d.as_secs(), d.subsec_millis())
}

impl Run {
    pub fn start(out_dir: &Path, subcommand: &str, verbose: bool) -> Result<Self, CliError> {
        fs::create_dir_all(out_dir)?;
        let target = out_dir.join(subcommand);
        let staging = out_dir.join(format!(".{subcommand}.partial-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;
        let mut run = Self {
            subcommand: subcommand.to_string(),
            staging,
            target,
            files: Vec::new(),
            seeds: BTreeMap::new(),
            assertions: Vec::new(),
            notes: Vec::new(),
            log: Vec::new(),
            verbose,
        };
        run.log(&format!("start {subcommand}"));
        Ok(run)
    }

    pub fn target(&self) -> &Path {
        &self.target
    }

    pub fn log(&mut self, message: &str) {
        if self.verbose {
            eprintln!("[{}] {message}", self.subcommand);
        }
        self.log.push(format!("{} {message}", timestamp()));
    }

    pub fn seed(&mut self, root: u64, purpose: &str, coords: &[u64]) -> u64 {
        let label = format!("{}/{purpose}", self.subcommand);
        let s = fbsde_core::rng::derive_seed(root, &label, coords);
        let key = if coords.is_empty() {
            purpose.to_string()
        } else {
            format!("{purpose}{coords:?}")
        };
        self.seeds.insert(key, s);
        s
    }

    /// Writes a file through `write` and records its digest.
    pub fn emit(
        &mut self,
        name: &str,
        write: impl FnOnce(&mut BufWriter<fs::File>) -> Result<(), CliError>,
    ) -> Result<(), CliError> {
        let path = self.staging.join(name);
        let mut w = BufWriter::new(fs::File::create(&path)?);
        write(&mut w)?;
        w.flush()?;
        drop(w);
        let bytes = fs::read(&path)?;
        self.files.push(FileEntry {
            name: name.to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            bytes: bytes.len() as u64,
        });
        self.log(&format!("wrote {name} ({} bytes)", bytes.len()));
        Ok(())
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<Cell>]) -> Result<(), CliError> {
        self.emit(name, |w| {
            let mut out = csv::WriterBuilder::new().from_writer(w);
            out.write_record(header).map_err(csv_error)?;
            for row in rows {
                if row.len() != header.len() {
                    return Err(CliError::Internal(format!(
                        "{name}: row width does not match header"
                    )));
                }
                out.write_record(row.iter().map(Cell::render))
                    .map_err(csv_error)?;
            }
            out.flush()?;
            Ok(())
        })
    }

    pub fn assert_le(&mut self, name: &str, measured: f64, required: f64) {
        self.push_assertion(name, measured, required, "<=", measured <= required);
    }

    pub fn assert_ge(&mut self, name: &str, measured: f64, required: f64) {
        self.push_assertion(name, measured, required, ">=", measured >= required);
    }

    pub fn push_assertion(
        &mut self,
        name: &str,
        measured: f64,
        required: f64,
        relation: &str,
        passed: bool,
    ) {
        self.log(&format!(
            "assertion {name}: measured {measured} {relation} {required}: {}",
            if passed { "pass" } else { "FAIL" }
        ));
        self.assertions.push(Assertion {
            name: name.to_string(),
            measured,
            required,
            relation: relation.to_string(),
            passed,
        });
    }

    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    /// Writes the manifest and the sidecar log, then moves the staging
    /// directory over the target.
    pub fn finish(
        mut self,
        config: &serde_json::Value,
        seed_root: u64,
    ) -> Result<PathBuf, CliError> {
        let manifest = Manifest {
            subcommand: &self.subcommand,
            config,
            seed_root,
            seeds: &self.seeds,
            files: &self.files,
            assertions: &self.assertions,
            passed: self.passed(),
            notes: &self.notes,
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::Internal(e.to_string()))?;
        fs::write(self.staging.join("manifest.json"), text + "\n")?;
        self.log("finished");
        fs::write(self.staging.join("run.log"), self.log.join("\n") + "\n")?;
        if self.target.exists() {
            fs::remove_dir_all(&self.target)?;
        }
        fs::rename(&self.staging, &self.target)?;
        Ok(self.target.clone())
    }

    /// Removes every partial output.
    pub fn abandon(self) {
        let _ = fs::remove_dir_all(&self.staging);
    }
}

fn csv_error(e: csv::Error) -> CliError {
    CliError::Internal(format!("csv: {e}"))
}
