use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mmtok_cli::commands;
use mmtok_cli::config::PipelineConfig;
use mmtok_cli::CliError;

#[derive(Parser)]
#[command(name = "mmtok", version, about = "Discrete multimodal token pipeline")]
struct Cli {
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Log level: error, warn, info, debug, trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a residual-quantizer codebook for one modality.
    TrainTokenizer {
        #[arg(long)]
        modality: String,
    },
    /// Tokenize raw records, build templated samples, pack, and write the
    /// vocab manifest.
    BuildDataset,
    /// Train the toy LM on the packed dataset.
    Train,
    /// Generate from a prompt file, parse, and detokenize.
    Generate {
        #[arg(long)]
        prompts: PathBuf,
    },
    /// Run the two-stage dialog synthesis pipeline.
    Synth,
    /// Emit the evaluation report.
    Eval,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config is required".into()))?;
    let mut config = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let config = load_config(cli)?;
    match &cli.command {
        Command::TrainTokenizer { modality } => {
            let report = commands::cmd_train_tokenizer(&config, modality)?;
            println!("{}", serde_json::to_string_pretty(&report).unwrap());
        }
        Command::BuildDataset => {
            let report = commands::cmd_build_dataset(&config)?;
            println!("{}", serde_json::to_string_pretty(&report).unwrap());
        }
        Command::Train => {
            let report = commands::cmd_train(&config)?;
            println!("{}", serde_json::to_string_pretty(&report).unwrap());
        }
        Command::Generate { prompts } => {
            let report = commands::cmd_generate(&config, prompts)?;
            println!("{}", serde_json::to_string_pretty(&report).unwrap());
        }
        Command::Synth => {
            let report = commands::cmd_synth(&config)?;
            println!("{}", serde_json::to_string_pretty(&report).unwrap());
        }
        Command::Eval => {
            let report = commands::cmd_eval(&config)?;
            println!("{}", serde_json::to_string_pretty(&report).unwrap());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
