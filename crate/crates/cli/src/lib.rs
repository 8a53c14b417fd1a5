//! Command-line front end: dataset synthesis, training, deraining,
//! evaluation, ablation sweeps and gradient checks.

pub mod ablate;
mod commands;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use emrf_core::config::RunConfig;
use serde_json::Value;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "EMRF_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "emrf",
    version,
    about = "EM-attention image deraining",
    after_help = "Any configuration field can be set as --<section>.<field> VALUE, \
                  e.g. --model.em.iterations 3 or --model.depths 2,2,2,0."
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration merged over the preset.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for training and streak synthesis.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Base configuration (default: desk for ablate, paper otherwise).
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic rainy/clean dataset with a manifest.
    Synth {
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// Side of the procedural clean scenes.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Directory of clean .ppm/.pgm images used instead of procedural scenes.
        #[arg(long, value_name = "DIR")]
        clean: Option<PathBuf>,
    },
    /// Train on a dataset directory; writes log.csv, best.emrf, final.emrf.
    Train {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Derain every image of a file or directory with a checkpoint.
    Derain {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
    },
    /// Paired metrics between two directories of same-named images.
    Eval {
        #[arg(long, value_name = "DIR")]
        pred: PathBuf,
        #[arg(long, value_name = "DIR")]
        gt: PathBuf,
    },
    /// Sweep EM iterations and LMB cascades with desk-scale trainings.
    Ablate {
        /// Existing dataset; a synthetic one is rendered into OUT/data otherwise.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Finite-difference check of every gradient; fails on any mismatch.
    Gradcheck {
        /// Sampled elements per parameter tensor.
        #[arg(long, default_value_t = 4)]
        per_tensor: usize,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl From<emrf_core::Error> for CliError {
    fn from(e: emrf_core::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

/// Leaf paths of a JSON document, dotted.
fn leaf_paths(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let p = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                leaf_paths(child, &p, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

fn override_paths() -> Vec<String> {
    let mut paths = Vec::new();
    let doc = serde_json::to_value(RunConfig::default()).expect("config serializes");
    leaf_paths(&doc, "", &mut paths);
    paths
}

fn command() -> clap::Command {
    override_paths().into_iter().fold(Cli::command(), |cmd, path| {
        cmd.arg(
            clap::Arg::new(path.clone())
                .long(path)
                .value_name("VALUE")
                .action(clap::ArgAction::Append)
                .global(true)
                .hide(true),
        )
    })
}

/// Overrides in command-line order.
fn collect_overrides(top: &ArgMatches) -> Vec<(String, String)> {
    let sub = top.subcommand().map(|(_, m)| m);
    let mut found: Vec<(usize, String, String)> = Vec::new();
    for path in override_paths() {
        for m in [Some(top), sub].into_iter().flatten() {
            if let (Some(vals), Some(idx)) = (m.get_many::<String>(&path), m.indices_of(&path)) {
                for (v, i) in vals.zip(idx) {
                    found.push((i, path.clone(), v.clone()));
                }
                break;
            }
        }
    }
    found.sort_by_key(|f| f.0);
    found.dedup();
    found.into_iter().map(|(_, p, v)| (p, v)).collect()
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn resolve_config(
    common: &Common,
    default_preset: Preset,
    overrides: &[(String, String)],
) -> Result<RunConfig, CliError> {
    let base = match common.preset.unwrap_or(default_preset) {
        Preset::Desk => RunConfig::desk(),
        Preset::Paper => RunConfig::default(),
    };
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
            let patch: Value =
                serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("parsing {}: {e}", path.display()))?;
            let mut doc = serde_json::to_value(&base).map_err(anyhow::Error::from)?;
            merge(&mut doc, patch);
            serde_json::from_value(doc).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?
        }
        None => base,
    };
    cfg = cfg
        .with_overrides(overrides.iter().map(|(p, v)| (p.as_str(), v.as_str())))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.streaks.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_out(common: &Common) -> Result<&Path, CliError> {
    common
        .out
        .as_deref()
        .ok_or_else(|| CliError::Usage("this subcommand needs --out DIR".into()))
}

fn init_threads() {
    let n = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    if let Some(n) = n {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<(), CliError> {
    let common = &cli.common;
    match cli.command {
        Command::Synth { count, size, clean } => {
            let cfg = resolve_config(common, Preset::Paper, overrides)?;
            commands::synth(&cfg, require_out(common)?, count, size, clean.as_deref())?;
        }
        Command::Train { data } => {
            let cfg = resolve_config(common, Preset::Paper, overrides)?;
            commands::train(&cfg, &data, require_out(common)?)?;
        }
        Command::Derain { checkpoint, input } => {
            commands::derain(&checkpoint, &input, require_out(common)?)?;
        }
        Command::Eval { pred, gt } => {
            let cfg = resolve_config(common, Preset::Paper, overrides)?;
            commands::eval(&cfg, &pred, &gt, common.out.as_deref())?;
        }
        Command::Ablate {
            data,
            seeds,
            count,
            size,
        } => {
            let cfg = resolve_config(common, Preset::Desk, overrides)?;
            if seeds == 0 {
                return Err(CliError::Usage("--seeds must be at least 1".into()));
            }
            commands::ablate(&cfg, require_out(common)?, data.as_deref(), seeds, count, size)?;
        }
        Command::Gradcheck { per_tensor } => {
            let cfg = resolve_config(common, Preset::Desk, overrides)?;
            commands::gradcheck(cfg.train.seed, per_tensor, common.out.as_deref())?;
        }
    }
    Ok(())
}

/// The error chain joined by `: `, skipping causes already quoted by the
/// message above them.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

/// Runs the command line `argv` (program name first) and returns the exit
/// code: 0 on success, 1 on runtime failure, 2 on usage errors.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let overrides = collect_overrides(&matches);
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_threads();
    match run(cli, &overrides) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {}", describe(&e));
            1
        }
    }
}
