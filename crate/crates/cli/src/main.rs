use std::path::PathBuf;
use std::process::ExitCode;

use awd_core::trainer::CONFIG_KEYS;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

mod commands;

/// Sequence VAEs with adversarial word dropout.
#[derive(Parser, Debug)]
#[command(name = "awd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model into a run directory (or resume one with --ckpt).
    Train {
        #[command(flatten)]
        flags: TrainFlags,
        /// Run directory; defaults to a fresh directory under $AWD_RUN_ROOT.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from this checkpoint instead of starting fresh.
        #[arg(long)]
        ckpt: Option<String>,
    },
    /// Report -ELBO, reconstruction, KL, perplexity and MI on a corpus.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        /// Corpus to evaluate; defaults to the run's validation split.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Posterior samples per sentence for the MI estimate.
        #[arg(long, default_value_t = 1)]
        mi_samples: usize,
        /// Importance samples per sentence for a tighter bound (0 skips it).
        #[arg(long, default_value_t = 0)]
        iw_samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Decode sentences from prior samples.
    Generate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, value_enum, default_value_t = Mode::Greedy)]
        mode: Mode,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        max_len: usize,
    },
    /// Greedy decodes along the line between two posterior means.
    Interpolate {
        #[command(flatten)]
        model: ModelArgs,
        /// First sentence: a file holding it, or the sentence itself.
        #[arg(long)]
        a: String,
        /// Second sentence: a file holding it, or the sentence itself.
        #[arg(long)]
        b: String,
        /// Interior points between the endpoints.
        #[arg(long, default_value_t = 3)]
        steps: usize,
        #[arg(long, default_value_t = 30)]
        max_len: usize,
    },
    /// Per-token adversary saliency with the dropped positions marked.
    Saliency {
        #[command(flatten)]
        model: ModelArgs,
        /// Corpus file, one sentence per line.
        #[arg(long, conflicts_with = "sentence")]
        data: Option<PathBuf>,
        /// A single sentence.
        #[arg(long)]
        sentence: Option<String>,
        /// Dropout rate used to pick K; defaults to the trained rate.
        #[arg(long)]
        dropout_rate: Option<f64>,
    },
    /// Write train/valid/test splits sampled from a Markov chain.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        /// Training sentences; valid and test get a tenth each.
        #[arg(long, default_value_t = 5000)]
        n: usize,
        #[arg(long, value_enum, default_value_t = Chain::Planted)]
        mode: Chain,
        /// State count for the uniform chain.
        #[arg(long, default_value_t = 15)]
        states: usize,
        #[arg(long, default_value_t = 8)]
        min_len: usize,
        #[arg(long, default_value_t = 12)]
        max_len: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train every (learning rate, dropout rate) pair in its own run directory.
    Grid {
        #[command(flatten)]
        flags: TrainFlags,
        /// Grid root; defaults to a fresh directory under $AWD_RUN_ROOT.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.0001,0.001,0.1,1")]
        lrs: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.5")]
        rates: Vec<f64>,
        /// Runs trained at the same time.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
}

/// Training options. Flags override values from --config.
#[derive(Args, Debug, Clone)]
struct TrainFlags {
    /// key = value config file (see `awd-core` CONFIG_KEYS for every key).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value overrides, applied after the file and before flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dropout_rate: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    adversary: Option<Adversary>,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Checkpoint file, or `best` / `last` inside the run directory.
    #[arg(long, default_value = "best")]
    ckpt: String,
    /// Run directory for `best` / `last` and for outputs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Adversary {
    On,
    Uniform,
    Off,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Mode {
    Greedy,
    Sample,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Chain {
    Planted,
    Uniform,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let keys = config_key_help();
    let cmd = Cli::command()
        .mut_subcommand("train", |c| c.after_long_help(keys.clone()))
        .mut_subcommand("grid", |c| c.after_long_help(keys));
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn config_key_help() -> String {
    let width = CONFIG_KEYS.iter().map(|(k, _, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from("Config keys (file form `key = value`, defaults shown):\n");
    for (key, default, help) in CONFIG_KEYS {
        out.push_str(&format!("  {key:<width$}  {default:<10}  {help}\n"));
    }
    out
}
