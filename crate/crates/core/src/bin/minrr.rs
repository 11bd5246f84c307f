use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use minrr::harness::commands::{self as cmd, EvalSource, ModelChoice, Workspace};
use minrr::harness::PipelineConfig;

#[derive(Parser)]
#[command(
    name = "minrr",
    version,
    about = "Storage-minimal retrieve-and-read QA on synthetic corpora"
)]
struct Cli {
    /// Overrides the `seed` key of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Working directory for every artifact.
    #[arg(long, global = true, default_value = "minrr-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and question set.
    GenSynthetic,
    /// Train the passage filter.
    TrainFilter,
    /// Keep the filter's top passages.
    FilterCorpus {
        /// Passages to keep; defaults to `subset_size`.
        #[arg(long)]
        keep: Option<usize>,
    },
    /// Train the shared student retriever.
    TrainRetriever,
    /// Train the teacher retriever and reader.
    TrainTeacher,
    /// Distil the teacher into a unified retriever-reader.
    Distill,
    /// Iteratively finetune the distilled model.
    Finetune,
    /// Encode the working corpus into a flat index.
    BuildIndex {
        #[arg(long, default_value = "unified")]
        model: ModelChoice,
    },
    /// Quantize the flat index to 8-bit codes.
    QuantizeIndex,
    /// Compress the newest unified model, index and corpus into package/.
    Pack,
    /// Exact match and retrieval hits on the dev questions.
    Evaluate {
        #[arg(long, default_value = "unified")]
        model: ModelChoice,
        /// Use this index file instead of building one.
        #[arg(long, conflicts_with = "package")]
        index: Option<PathBuf>,
        /// Evaluate the packed system.
        #[arg(long)]
        package: bool,
    },
    /// Footprint ledger over stage and package directories.
    Ledger,
    /// Every stage in order.
    RunAll,
}

fn run(cli: Cli) -> minrr::Result<String> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::from_text(&std::fs::read_to_string(p)?)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let ws = Workspace::new(cli.out, config);
    match cli.command {
        Command::GenSynthetic => cmd::cmd_gen_synthetic(&ws),
        Command::TrainFilter => cmd::cmd_train_filter(&ws),
        Command::FilterCorpus { keep } => cmd::cmd_filter_corpus(&ws, keep),
        Command::TrainRetriever => cmd::cmd_train_retriever(&ws),
        Command::TrainTeacher => cmd::cmd_train_teacher(&ws),
        Command::Distill => cmd::cmd_distill(&ws),
        Command::Finetune => cmd::cmd_finetune(&ws),
        Command::BuildIndex { model } => cmd::cmd_build_index(&ws, model),
        Command::QuantizeIndex => cmd::cmd_quantize_index(&ws),
        Command::Pack => cmd::cmd_pack(&ws),
        Command::Evaluate {
            model,
            index,
            package,
        } => {
            let source = if package {
                EvalSource::Package
            } else {
                EvalSource::Model {
                    choice: model,
                    index,
                }
            };
            cmd::cmd_evaluate(&ws, &source)
        }
        Command::Ledger => cmd::cmd_ledger(&ws),
        Command::RunAll => cmd::cmd_run_all(&ws),
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on bad usage; usage errors are 1 here
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
