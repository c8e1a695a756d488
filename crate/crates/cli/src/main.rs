use std::path::PathBuf;
use std::process::ExitCode;

use adapter_lens_cli::{run, CliError, Command, ExperimentConfig, Layout};
use clap::{Parser, Subcommand};

/// Train language adapters on synthetic languages and analyze them.
#[derive(Debug, Parser)]
#[command(name = "adapter-lens", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,

    /// JSON experiment config; unspecified fields keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config field, e.g. `--set pretrain.steps=500`. Repeatable;
    /// applied after the config file in the order given.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Root under which run directories are created.
    #[arg(long, default_value = "runs", global = true)]
    out: PathBuf,

    /// Sets the corpus, pretrain, adapt and analysis seeds at once.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Sub {
    /// Generate and save the synthetic language pair.
    SynthGen,
    /// Pre-train the base model on the source language.
    Pretrain,
    /// Train adapters on the target language over the pre-trained base.
    Adapt,
    /// Logit-lens language fractions per layer.
    Lens,
    /// Adapter, FFN, and residual norms per layer.
    Norms,
    /// Perplexity after removing adapters over layer spans.
    Ablate,
    /// MMD-ranked sparse probes separating adapted from unadapted states.
    Probe,
    /// Perplexity after zeroing or mean-replacing MMD-selected features.
    Intervene,
    /// Principal-component alignment of source and adapted target states.
    PcaAlign,
    /// Every analysis for one checkpoint pair.
    Report,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::SynthGen => Command::SynthGen,
            Sub::Pretrain => Command::Pretrain,
            Sub::Adapt => Command::Adapt,
            Sub::Lens => Command::Lens,
            Sub::Norms => Command::Norms,
            Sub::Ablate => Command::Ablate,
            Sub::Probe => Command::Probe,
            Sub::Intervene => Command::Intervene,
            Sub::PcaAlign => Command::PcaAlign,
            Sub::Report => Command::Report,
        }
    }
}

fn execute(cli: &Cli) -> Result<serde_json::Value, CliError> {
    let config = ExperimentConfig::resolve(cli.config.as_deref(), cli.seed, &cli.set)?;
    let layout = Layout::new(&cli.out, config);
    Ok(run(cli.command.into(), &layout)?.to_json())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            eprintln!("{e}");
            println!("{}", CliError::Schema(e.kind().to_string()).to_json());
            return ExitCode::from(2);
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            println!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
