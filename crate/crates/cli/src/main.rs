//! `incepformer` command-line tool: synthetic data, preprocessing, training,
//! evaluation, baselines and ablations with reproducible run directories.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use incepformer::baselines::Method;
use incepformer::eval::{itr, FoldSelection};
use serde_json::{json, Value};

use config::{parse_assignment, resolve};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] incepformer::Error),
}

impl CliError {
    /// 2 usage, 3 data or format, 4 numerical failure.
    fn exit_code(&self) -> u8 {
        use incepformer::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(E::Config(_) | E::Parameter(_)) => 2,
            CliError::Core(E::Numerical(_)) => 4,
            CliError::Core(_) => 3,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "incepformer", version, about = "SSVEP decoding with IncepFormerNet, CCA and FBCCA")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON configuration file; flags take precedence over it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory for run directories
    #[arg(long, global = true)]
    outdir: Option<PathBuf>,
    /// Folds trained in parallel
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Epoch length in seconds
    #[arg(long, global = true)]
    tw: Option<f64>,
    /// Visual latency in seconds
    #[arg(long, global = true)]
    td: Option<f64>,
    /// Any configuration key by dotted path, e.g. `--set model.d_model=32`
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic recording and its sub-band epochs
    Synth,
    /// Filter-bank and epoch a raw archive
    Preprocess {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Leave-one-block-out training; writes checkpoints and a report
    Train {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Only `lobo` is supported
        #[arg(long, conflicts_with = "fold")]
        folds: Option<String>,
        /// Run a single fold (0-based, ascending test block)
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Score a checkpoint on an epoch archive, block by block
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Comma-separated block ids (default: every block)
        #[arg(long, value_delimiter = ',')]
        blocks: Option<Vec<usize>>,
    },
    /// Training-free CCA or FBCCA over leave-one-block-out test blocks
    Baseline {
        #[arg(long)]
        input: Option<PathBuf>,
        /// cca or fbcca
        #[arg(long)]
        method: Option<String>,
    },
    /// Information transfer rate in bits/min
    Itr {
        /// Accuracy in [0, 1]
        p: f64,
        /// Number of targets
        n: usize,
        /// Seconds per selection
        t: f64,
    },
    /// Sweep the number of multi-scale blocks
    Ablate {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Comma-separated block counts (default 1..6)
        #[arg(long, value_delimiter = ',')]
        n_blocks: Option<Vec<usize>>,
    },
    /// Pre-classifier features as CSV
    ExportFeatures {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn path_value(p: &std::path::Path) -> Value {
    json!(p.to_string_lossy())
}

fn overrides(common: &Common, command: &Command) -> Result<Vec<(String, Value)>, CliError> {
    let mut out = Vec::new();
    for s in &common.set {
        out.push(parse_assignment(s)?);
    }
    let mut put = |k: &str, v: Value| out.push((k.to_string(), v));
    if let Some(s) = common.seed {
        put("seed", json!(s));
    }
    if let Some(d) = &common.outdir {
        put("outdir", path_value(d));
    }
    if let Some(w) = common.workers {
        put("workers", json!(w));
    }
    if let Some(t) = common.tw {
        put("pipeline.tw", json!(t));
    }
    if let Some(t) = common.td {
        put("pipeline.td", json!(t));
    }
    let (input, checkpoint) = match command {
        Command::Preprocess { input }
        | Command::Train { input, .. }
        | Command::Baseline { input, .. }
        | Command::Ablate { input, .. } => (input.as_ref(), None),
        Command::Eval { input, checkpoint, .. } | Command::ExportFeatures { input, checkpoint } => {
            (input.as_ref(), checkpoint.as_ref())
        }
        Command::Synth | Command::Itr { .. } => (None, None),
    };
    if let Some(p) = input {
        put("input", path_value(p));
    }
    if let Some(p) = checkpoint {
        put("checkpoint", path_value(p));
    }
    if let Command::Baseline { method: Some(m), .. } = command {
        let m = Method::from_str(m).map_err(|e| CliError::Usage(e.to_string()))?;
        put("baseline.method", serde_json::to_value(m).expect("method serializes"));
    }
    if let Command::Ablate { n_blocks: Some(n), .. } = command {
        put("ablation.n_blocks", json!(n));
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::Itr { p, n, t } = cli.command {
        println!("{:.4}", itr(p, n, t)?);
        return Ok(());
    }
    let cfg = resolve(cli.common.config.as_deref(), &overrides(&cli.common, &cli.command)?)?;
    match cli.command {
        Command::Synth => commands::synth(&cfg)?,
        Command::Preprocess { .. } => commands::preprocess_cmd(&cfg)?,
        Command::Train { folds, fold, .. } => {
            let selection = match (folds.as_deref(), fold) {
                (_, Some(k)) => FoldSelection::One(k),
                (None | Some("lobo"), None) => FoldSelection::All,
                (Some(other), None) => return Err(CliError::Usage(format!("unknown fold scheme `{other}` (expected lobo)"))),
            };
            commands::train(&cfg, selection)?
        }
        Command::Eval { blocks, .. } => commands::eval(&cfg, blocks)?,
        Command::Baseline { .. } => commands::baseline(&cfg)?,
        Command::Ablate { .. } => commands::ablate(&cfg)?,
        Command::ExportFeatures { .. } => commands::export(&cfg)?,
        Command::Itr { .. } => unreachable!("handled above"),
    };
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
