use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use colap::cli::{self, GlobalOptions};
use colap::data::SelectionMode;

#[derive(Parser)]
#[command(
    name = "colap",
    version,
    about = "Few-shot cross-lingual transfer with contrastive alignment"
)]
struct Cli {
    /// Replace the configured seed(s) with this one.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Worker threads for seed-level parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output directory (or output file for `select`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic corpora and a manifest from a spec file.
    Generate { spec: PathBuf },
    /// Run an experiment file and write report.json / report.csv.
    Run { experiment: PathBuf },
    /// Score a source corpus with a checkpoint and select K exemplars.
    Select {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short = 'k', long)]
        k: usize,
        #[arg(long, default_value = "high")]
        mode: SelectionMode,
    },
    /// Rerun an experiment once per tap layer.
    AblateLayer {
        experiment: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        layers: Vec<usize>,
    },
}

fn main() -> ExitCode {
    let args = Cli::parse();
    let opts = GlobalOptions {
        seed_override: args.seed_override,
        jobs: args.jobs,
        out: args.out.clone(),
    };
    let result = match &args.command {
        Command::Generate { spec } => {
            let out = opts.out.clone().unwrap_or_else(|| PathBuf::from("."));
            cli::cmd_generate(spec, &out, opts.seed_override).map(|_| ())
        }
        Command::Run { experiment } => cli::cmd_run(experiment, &opts).map(|_| ()),
        Command::Select {
            corpus,
            checkpoint,
            k,
            mode,
        } => {
            let out = opts.out.clone().unwrap_or_else(|| PathBuf::from("selection.csv"));
            cli::cmd_select(corpus, checkpoint, *k, *mode, opts.seed_override.unwrap_or(0), &out).map(|_| ())
        }
        Command::AblateLayer { experiment, layers } => cli::cmd_ablate_layer(experiment, layers, &opts).map(|_| ()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
