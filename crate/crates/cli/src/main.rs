//! `starseq`: preprocess, train, evaluate, probe and benchmark from the shell.
//!
//! Every command writes one primary artifact plus `<artifact>.manifest.json`
//! into the output directory. Failures print a single JSON line on stderr and
//! exit with 2 for usage or configuration errors and 1 otherwise.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use starseq::config::{parse_override, RunConfig};
use starseq::model::ModelKind;
use starseq::Error;
use toml::{Table, Value};

#[derive(Parser)]
#[command(name = "starseq", version, about = "Star-graph sequential recommendation toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Precedence, lowest first: built-in
/// defaults, preset, config file, `--set`, then the dedicated flags.
#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed; every derived seed follows it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for the artifact and its manifest.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Model family.
    #[arg(long, global = true, value_name = "star|baseline")]
    model: Option<String>,

    /// Named hyper-parameter preset.
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,

    /// Override any config key, e.g. `--set model.d=32`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Filter and index a TSV log into a dataset snapshot.
    Prep {
        /// Interaction log (user, item, rating, timestamp).
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
    },
    /// Write the deterministic-successor synthetic log as TSV.
    Synth,
    /// Train a model on a snapshot; one JSON line per epoch on stdout.
    Train {
        /// Dataset snapshot written by `prep`.
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint with leave-one-out ranking metrics.
    Eval {
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Which held-out item to rank.
        #[arg(long, default_value = "test", value_name = "val|test")]
        split: String,
    },
    /// Representation probes on a trained checkpoint.
    Probe {
        #[command(subcommand)]
        probe: Probe,
    },
    /// Operation counts and runtime scaling.
    Bench {
        #[command(subcommand)]
        bench: Bench,
    },
}

#[derive(Subcommand)]
enum Probe {
    /// Mean pairwise cosine similarity of item states after each block.
    Smoothing(ProbeInputs),
    /// Attention entropy against a uniform reference (baseline only).
    Entropy(ProbeInputs),
}

#[derive(Args)]
struct ProbeInputs {
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Bench {
    /// Closed-form multiply-add counts for one layer.
    Ops {
        #[arg(long)]
        n: u64,
        #[arg(long)]
        d: u64,
    },
    /// Time inference of both models over the configured length grid.
    Runtime,
}

fn table(key: &str, value: Value) -> Table {
    Table::from_iter([(key.to_string(), value)])
}

fn resolve(common: &Common) -> starseq::Result<RunConfig> {
    let mut overrides = common
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<starseq::Result<Vec<_>>>()?;
    if let Some(seed) = common.seed {
        let seed = i64::try_from(seed).map_err(|_| Error::Config("--seed does not fit in 63 bits".into()))?;
        overrides.push(table("seed", Value::Integer(seed)));
    }
    if let Some(model) = &common.model {
        model.parse::<ModelKind>()?;
        overrides.push(table("kind", Value::String(model.clone())));
    }
    if let Some(preset) = &common.preset {
        overrides.push(table("preset", Value::String(preset.clone())));
    }
    if let Some(out) = &common.out {
        overrides.push(table("out_dir", Value::String(out.to_string_lossy().into_owned())));
    }
    RunConfig::load(common.config.as_deref(), overrides)
}

/// Applies `STARSEQ_THREADS` to the global worker pool.
fn init_threads() -> starseq::Result<()> {
    let Ok(raw) = std::env::var("STARSEQ_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| Error::Config(format!("STARSEQ_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size worker pool: {e}")))
}

fn run(cli: Cli) -> starseq::Result<()> {
    init_threads()?;
    let cfg = resolve(&cli.common)?;
    match cli.command {
        Command::Prep { input } => commands::prep(&cfg, input),
        Command::Synth => commands::synth(&cfg),
        Command::Train { data } => commands::train(&cfg, data),
        Command::Eval { data, checkpoint, split } => commands::eval(&cfg, data, checkpoint, split.parse()?),
        Command::Probe { probe: Probe::Smoothing(p) } => commands::smoothing(&cfg, p.data, p.checkpoint),
        Command::Probe { probe: Probe::Entropy(p) } => commands::entropy(&cfg, p.data, p.checkpoint),
        Command::Bench { bench: Bench::Ops { n, d } } => commands::ops(&cfg, n, d),
        Command::Bench { bench: Bench::Runtime } => commands::runtime(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}
