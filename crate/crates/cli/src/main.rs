mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

/// Bad command line or configuration; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "gaittr", version, about = "Skeleton-based gait recognition: synthetic data, training and cross-view evaluation")]
pub struct Cli {
    /// Caps the worker threads used for data preparation and embedding.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Config file with [data], [synth], [model], [train] and [eval] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides one config key, as section.key=value (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Dataset directory (data.root).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Manifest file (data.manifest).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// ST, MT, LT, train:<ids> or closed:<ids> (data.split).
    #[arg(long)]
    pub split: Option<String>,
    /// single or double (data.precision).
    #[arg(long)]
    pub precision: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generates a synthetic multi-view walking dataset.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// RNG seed (synth.seed); required.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of subjects (synth.subjects).
        #[arg(long)]
        subjects: Option<u32>,
        /// Frames per sequence (synth.frames).
        #[arg(long)]
        frames: Option<usize>,
        /// Comma-separated view angles (synth.views).
        #[arg(long)]
        views: Option<String>,
        /// gttr or csv (data.format).
        #[arg(long)]
        format: Option<String>,
    },
    /// Normalises a dataset and writes it back out, dropping unusable sequences.
    Preprocess {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// gttr or csv (data.format).
        #[arg(long)]
        format: Option<String>,
    },
    /// Trains a model on the training subjects of a dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Output directory for metrics, checkpoints and the model.
        #[arg(long)]
        out: PathBuf,
        /// RNG seed (train.seed); required.
        #[arg(long)]
        seed: Option<u64>,
        /// full or small (model.variant).
        #[arg(long)]
        variant: Option<String>,
        /// Iterations (train.total_iters).
        #[arg(long)]
        iters: Option<usize>,
        /// Triplet margin (train.margin).
        #[arg(long)]
        margin: Option<f64>,
        /// Checkpoint to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Rank-1 cross-view table of a trained model (or of dumped embeddings).
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Model or checkpoint file.
        #[arg(long, required_unless_present = "embeddings")]
        model: Option<PathBuf>,
        /// Embedding dump to score instead of running a model.
        #[arg(long, conflicts_with = "model")]
        embeddings: Option<PathBuf>,
        /// Output directory for rank1.csv, rank1.txt and embeddings.gttr.
        #[arg(long)]
        out: PathBuf,
        /// Centred inference window (eval.frames).
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Mean rank-1 accuracy against the number of inference frames.
    Curve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Model or checkpoint file.
        #[arg(long)]
        model: PathBuf,
        /// Output directory for curve.csv and curve.svg.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated window lengths (eval.lengths).
        #[arg(long)]
        lengths: Option<String>,
        /// Skip the SVG plot.
        #[arg(long)]
        no_plot: bool,
    },
    /// Per-block parameter counts.
    Params {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// full or small (model.variant).
        #[arg(long)]
        variant: Option<String>,
        /// Also print the attention-factor / kernel reconciliation grid.
        #[arg(long)]
        reconcile: bool,
    },
    /// Per-block FLOPs for one sequence.
    Flops {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// full or small (model.variant).
        #[arg(long)]
        variant: Option<String>,
        /// Sequence length.
        #[arg(long, default_value_t = 60)]
        frames: usize,
    },
}

fn command_with_key_help() -> clap::Command {
    let sections: [(&str, &[&str]); 7] = [
        ("synth", &["synth", "data"]),
        ("preprocess", &["data"]),
        ("train", &["data", "model", "train"]),
        ("eval", &["data", "eval"]),
        ("curve", &["data", "eval"]),
        ("params", &["model"]),
        ("flops", &["model"]),
    ];
    let mut cmd = Cli::command();
    for (name, secs) in sections {
        let help = config::keys_help(secs).replace("seed=0\n", "seed=(required)\n");
        cmd = cmd.mut_subcommand(name, |c| c.after_long_help(help));
    }
    cmd
}

fn main() -> ExitCode {
    let matches = match command_with_key_help().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(u) = e.downcast_ref::<UsageError>() {
                eprintln!("usage error: {u}");
                ExitCode::from(2)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        }
    }
}
