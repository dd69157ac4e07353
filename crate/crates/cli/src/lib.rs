//! Command-line front end: argument parsing, configuration, artifacts and the
//! subcommands.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod methods;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::artifacts::RunManifest;
use crate::commands::RunOptions;
use crate::config::{Command, Config};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "piba", version, about = "Input-level information bottleneck attribution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Sub,
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Generate a synthetic dataset.
    GenData(Common),
    /// Train a classifier on a dataset.
    Train(Common),
    /// Write attribution maps and heatmaps.
    Attribute(Common),
    /// Sensitivity-N over a maps directory.
    EvalSensn(Common),
    /// Insertion and deletion curves over a maps directory.
    EvalInsdel(Common),
    /// Remove-and-retrain over maps for every split.
    EvalRoar(Common),
    /// Localization scores over a maps directory.
    EvalEhr(Common),
    /// Cascading parameter randomization.
    SanityCheck(Common),
    /// Merge the reports in the output directory.
    Report(Common),
}

impl Sub {
    fn parts(&self) -> (Command, &Common) {
        match self {
            Sub::GenData(c) => (Command::GenData, c),
            Sub::Train(c) => (Command::Train, c),
            Sub::Attribute(c) => (Command::Attribute, c),
            Sub::EvalSensn(c) => (Command::EvalSensn, c),
            Sub::EvalInsdel(c) => (Command::EvalInsdel, c),
            Sub::EvalRoar(c) => (Command::EvalRoar, c),
            Sub::EvalEhr(c) => (Command::EvalEhr, c),
            Sub::SanityCheck(c) => (Command::SanityCheck, c),
            Sub::Report(c) => (Command::Report, c),
        }
    }
}

#[derive(Debug, Args)]
pub struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Re-run the configuration recorded in a manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory; defaults to $PIBA_OUT_DIR.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub maps: Option<String>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub index: Option<String>,
    #[arg(long)]
    pub count: Option<String>,
    #[arg(long)]
    pub split: Option<String>,
    /// Any other key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// Resolves the configuration: defaults, then the manifest, then the config
/// file, then flags.
pub fn resolve(command: Command, args: &Common) -> CliResult<Config> {
    let mut cfg = Config::new(command);
    if let Some(p) = &args.manifest {
        let m = RunManifest::load(p)?;
        if m.command != command.name() {
            return Err(CliError::Config(format!(
                "manifest is for `{}`, not `{}`",
                m.command,
                command.name()
            )));
        }
        for (k, v) in &m.config {
            cfg.set(k, v)?;
        }
    }
    if let Some(p) = &args.config {
        cfg.apply_file(p)?;
    }
    let flags = [
        ("seed", &args.seed),
        ("data", &args.data),
        ("model", &args.model),
        ("maps", &args.maps),
        ("method", &args.method),
        ("index", &args.index),
        ("count", &args.count),
        ("split", &args.split),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{kv}`")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn out_dir(args: &Common) -> CliResult<PathBuf> {
    match &args.out {
        Some(p) => Ok(p.clone()),
        None => std::env::var_os("PIBA_OUT_DIR")
            .map(PathBuf::from)
            .ok_or_else(|| CliError::Config("no --out given and PIBA_OUT_DIR is unset".into())),
    }
}

/// Runs a parsed command line.
pub fn execute(cli: &Cli) -> CliResult<RunManifest> {
    let (command, args) = cli.command.parts();
    let cfg = resolve(command, args)?;
    let opts = RunOptions {
        out: out_dir(args)?,
        workers: args.workers.max(1),
    };
    commands::run(&cfg, &opts)
}
