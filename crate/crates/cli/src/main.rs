//! `minor-sft`: train, compare, gradient-check and inspect from the command
//! line. Every output is a file (CSV, JSON, TOML or a checkpoint); log
//! verbosity follows `MINOR_SFT_LOG` (env_logger syntax).

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "minor-sft", version, about = "MinorSFT and relatives on a tiny byte-level LM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML config file; omitted means all defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override applied after the file, e.g. `train.learning_rate=2e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model and write runlog.csv, runlog.json and model.ckpt.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// JSONL corpus; the schema is detected from the first record.
        #[arg(long)]
        corpus: PathBuf,
        /// Corpus for `metric_source = "held_out"`.
        #[arg(long)]
        held_out: Option<PathBuf>,
        /// Start from this checkpoint instead of a fresh model; its
        /// architecture must match `[model]`.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train several configs on one corpus and join their curves by step.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        held_out: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central differences.
    GradCheck {
        /// Objective to check; repeat for several. Default: all five.
        #[arg(long = "objective")]
        objectives: Vec<String>,
        /// Seed to check; repeat for several. Default: 0.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Check seeds 0..N instead of listing them.
        #[arg(long, conflicts_with = "seeds")]
        sweep: Option<u64>,
        #[arg(long)]
        epsilon: Option<f64>,
        /// Coordinates sampled per parameter tensor; 0 checks all of them.
        #[arg(long)]
        coords_per_param: Option<usize>,
        /// Also write gradcheck.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the seeded synthetic corpus as JSONL.
    GenCorpus {
        #[arg(long, value_enum, default_value_t = SchemaArg::Sft)]
        schema: SchemaArg,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise a checkpoint, run log or corpus as JSON on stdout.
    Inspect { path: PathBuf },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SchemaArg {
    Sft,
    Preference,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MINOR_SFT_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            corpus,
            held_out,
            init,
            out,
        } => commands::train(
            config.config.as_deref(),
            &config.overrides,
            &corpus,
            held_out.as_deref(),
            init.as_deref(),
            &out,
        ),
        Command::Compare {
            config,
            corpus,
            held_out,
            out,
        } => commands::compare(config.config.as_deref(), &config.overrides, &corpus, held_out.as_deref(), &out),
        Command::GradCheck {
            objectives,
            seeds,
            sweep,
            epsilon,
            coords_per_param,
            out,
        } => commands::grad_check(commands::GradCheckArgs {
            objectives,
            seeds: match sweep {
                Some(n) => (0..n).collect(),
                None if seeds.is_empty() => vec![0],
                None => seeds,
            },
            epsilon,
            coords_per_param,
            out,
        }),
        Command::GenCorpus { schema, n, seed, out } => {
            commands::gen_corpus(matches!(schema, SchemaArg::Preference), n, seed, &out)
        }
        Command::Inspect { path } => commands::inspect(&path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", failure::render(&e));
            ExitCode::from(failure::classify(&e).exit_code() as u8)
        }
    }
}
