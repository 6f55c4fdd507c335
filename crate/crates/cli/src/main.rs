use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cn3_cli::export::DEFAULT_THRESHOLD;

#[derive(Parser)]
#[command(name = "cn3", version, about = "Train, evaluate and inspect CN3 models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed and CN3_SEED.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score an archived model on a data file.
    Eval {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// accuracy, token_accuracy or chunk_f1; defaults to the training metric.
        #[arg(long)]
        metric: Option<String>,
    },
    /// Write the attention matrices of every layer for each sentence.
    ExportStructure {
        #[arg(long)]
        archive: PathBuf,
        /// One whitespace-tokenised sentence per line.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// json or dot.
        #[arg(long, default_value = "json")]
        format: String,
        /// Smallest weight drawn as a DOT edge.
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Compare analytic and numeric gradients for the configured variant.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { cn3_cli::EXIT_CONFIG as u8 } else { 0 });
        }
    };
    let code = match cli.command {
        Command::Train { config, seed } => cn3_cli::cmd_train(&config, seed),
        Command::Eval { archive, data, metric } => cn3_cli::cmd_eval(&archive, &data, metric.as_deref()),
        Command::ExportStructure {
            archive,
            data,
            out,
            format,
            threshold,
        } => cn3_cli::cmd_export_structure(&archive, &data, &out, &format, threshold),
        Command::GradCheck { config } => cn3_cli::cmd_gradcheck(&config),
    };
    ExitCode::from(code as u8)
}
