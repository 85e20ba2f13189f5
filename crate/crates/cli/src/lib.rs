//! Batch runner for the small-noise FBSDE laboratory.
//!
//! Every subcommand reads a flat TOML config, writes its outputs into
//! `<out>/<subcommand>/` together with a `manifest.json` of SHA-256 digests,
//! and exits with a code that identifies the failure class.

pub mod commands;
pub mod config;
pub mod output;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use config::Config;
use output::Run;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Core(#[from] fbsde_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("output error: {0}")]
    Internal(String),
}

/// Exit code of a successful run whose requested assertions failed.
pub const EXIT_ASSERTION: i32 = 1;

impl CliError {
    /// Process exit code, one per failure class.
    pub fn exit_code(&self) -> i32 {
        use fbsde_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Parse(_) => 16,
            CliError::Io(_) | CliError::Internal(_) => 15,
            CliError::Core(e) => match e {
                E::Config(_) => 3,
                E::Evaluation { .. } => 4,
                E::PicardNonConvergence { .. } => 5,
                E::Shooting { .. } => 6,
                E::Divergence { .. } => 7,
                E::Contraction { .. } => 8,
                E::Excursion { .. } => 9,
                E::Shape(_) => 10,
                E::Contract(_) => 11,
                E::Domain(_) => 12,
                E::BranchExplosion { .. } => 13,
                E::NoHits(_) => 14,
                E::Io(_) => 15,
                E::Parse(_) => 16,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Sample the structural assumptions (Lipschitz, monotonicity, growth, ellipticity).
    CheckAssumptions,
    /// Solve the decoupling field for each epsilon and cache it as columnar text.
    SolveField,
    /// Solve the zero-noise two-point boundary problem.
    Limit,
    /// Simulate coupled trajectory bundles.
    Simulate,
    /// Start-point sensitivity moments across epsilon.
    #[command(name = "sweep-lemma1")]
    SweepLemma1,
    /// Second moments across epsilon.
    #[command(name = "sweep-lemma2")]
    SweepLemma2,
    /// Start-time sensitivity moments across epsilon.
    #[command(name = "sweep-lemma3")]
    SweepLemma3,
    /// Moment gaps between consecutive epsilons.
    #[command(name = "sweep-lemma4")]
    SweepLemma4,
    /// Sup-deviation probabilities, Meyer-Zheng distances and conditional variation.
    Theorem1,
    /// Rate-function evaluation, endpoint minimization and the empirical rate curve.
    Ldp,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::CheckAssumptions => "check-assumptions",
            Command::SolveField => "solve-field",
            Command::Limit => "limit",
            Command::Simulate => "simulate",
            Command::SweepLemma1 => "sweep-lemma1",
            Command::SweepLemma2 => "sweep-lemma2",
            Command::SweepLemma3 => "sweep-lemma3",
            Command::SweepLemma4 => "sweep-lemma4",
            Command::Theorem1 => "theorem1",
            Command::Ldp => "ldp",
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "fbsde-lab",
    version,
    about = "Small-noise FBSDE numerical laboratory"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat TOML config; omitted keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root; results go to `<out>/<subcommand>/`.
    #[arg(long, global = true, env = "FBSDE_LAB_OUT")]
    pub out: Option<PathBuf>,
    /// Overrides the config's root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub verbose: bool,
}

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub dir: PathBuf,
    pub passed: bool,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            EXIT_ASSERTION
        }
    }
}

pub fn load_config(command: Command, path: Option<&Path>) -> Result<Config, CliError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)?,
        None => String::new(),
    };
    Config::parse(command.name(), &text)
}

/// Runs one subcommand to completion; partial outputs are removed on error.
pub fn execute(cli: &Cli) -> Result<Outcome, CliError> {
    let mut cfg = load_config(cli.command, cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed)?;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.string("out_dir").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("fbsde-out"));
    let body = || -> Result<Outcome, CliError> {
        let mut run = Run::start(&out, cli.command.name(), cli.verbose)?;
        let result = match cli.command {
            Command::CheckAssumptions => commands::check_assumptions(&cfg, &mut run),
            Command::SolveField => commands::solve_field(&cfg, &mut run),
            Command::Limit => commands::limit(&cfg, &mut run),
            Command::Simulate => commands::simulate(&cfg, &mut run),
            Command::SweepLemma1 => commands::sweep_lemma(1, &cfg, &mut run),
            Command::SweepLemma2 => commands::sweep_lemma(2, &cfg, &mut run),
            Command::SweepLemma3 => commands::sweep_lemma(3, &cfg, &mut run),
            Command::SweepLemma4 => commands::sweep_lemma(4, &cfg, &mut run),
            Command::Theorem1 => commands::theorem1(&cfg, &mut run),
            Command::Ldp => commands::ldp(&cfg, &mut run),
        };
        match result {
            Ok(()) => {
                let passed = run.passed();
                let dir = run.finish(&cfg.to_json(), cfg.seed())?;
                Ok(Outcome { dir, passed })
            }
            Err(e) => {
                run.abandon();
                Err(e)
            }
        }
    };
    match cli.threads {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| CliError::Internal(e.to_string()))?
            .install(body),
        None => body(),
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(outcome) => {
            if !outcome.passed {
                eprintln!(
                    "assertions failed; see {}",
                    outcome.dir.join("manifest.json").display()
                );
            } else if cli.verbose {
                eprintln!("outputs in {}", outcome.dir.display());
            }
            outcome.exit_code()
        }
        Err(e) => {
            eprintln!("error ({}): {e}", class_name(&e));
            e.exit_code()
        }
    }
}

fn class_name(e: &CliError) -> &'static str {
    match e {
        CliError::Usage(_) => "usage",
        CliError::Parse(_) => "parse",
        CliError::Io(_) | CliError::Internal(_) => "io",
        CliError::Core(c) => c.class(),
    }
}
