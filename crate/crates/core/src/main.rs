use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tensorgp::cli::{cmd_eval, cmd_predict, cmd_split, cmd_synth, cmd_train, exit_code};
use tensorgp::executor::TrainOptions;

/// Nonlinear decomposition of binary multidimensional arrays.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn latent factors from a data file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for factors, checkpoint, metrics and manifest.
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop once this many rounds are complete.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score query entries with trained factors.
    Predict {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding factor_1.txt, factor_2.txt, ...
        #[arg(long)]
        factors: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the AUC of a scores file against labels.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Also write the metrics to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic binary array from the model.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one fold of the held-out evaluation split.
    Split {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// 1-based fold number.
        #[arg(long, default_value_t = 1)]
        fold: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            data,
            out,
            resume,
            stop_after,
        } => {
            let opts = TrainOptions {
                resume,
                stop_after,
                keep_history: false,
            };
            cmd_train(&config, &data, &out, &opts).map(|_| ())
        }
        Command::Predict {
            config,
            factors,
            data,
            queries,
            out,
        } => cmd_predict(&factors, &data, &queries, &config, &out).map(|_| ()),
        Command::Eval {
            scores,
            labels,
            out,
        } => cmd_eval(&scores, &labels, out.as_deref()).map(|a| println!("auc={a:.6}")),
        Command::Synth { config, out } => cmd_synth(&config, &out).map(|_| ()),
        Command::Split {
            config,
            data,
            fold,
            out,
        } => cmd_split(&config, &data, fold, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
