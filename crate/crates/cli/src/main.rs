mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::{CliError, Context};

#[derive(Parser, Debug)]
#[command(name = "siu", version, about = "Self information update pipeline and exposure-bias lab")]
struct Cli {
    /// Pipeline config (TOML or JSON); SIU_* variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// "toy" or "remote:URL".
    #[arg(long, global = true)]
    backend: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Method {
    FactFt,
    Naive,
    ContextAware,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::FactFt => "fact_ft",
            Method::Naive => "naive",
            Method::ContextAware => "context_aware",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Jsonl,
    PlainDir,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate and normalize the update corpus.
    Ingest {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
    },
    /// Self-generate grounded pairs and assemble the fine-tuning set.
    Gendata,
    /// Render, tokenize and pack training data for one method.
    Build {
        #[arg(long, value_enum)]
        method: Method,
    },
    /// Fine-tune the toy base model on a built dataset.
    Train {
        #[arg(long, value_enum)]
        method: Method,
    },
    /// Generate, score and report every method.
    Eval {
        /// Comma-separated subset of mixinst,fact_ft,naive,context_aware.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
    },
    /// Run the exposure-bias experiment.
    Lab {
        /// Degenerate world without updates.
        #[arg(long)]
        null_control: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = config::load(cli.config.as_deref(), std::env::vars()).map_err(CliError::Config)?;
    if let Some(b) = cli.backend {
        cfg.backend.spec = b;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.train.seed = s;
        cfg.eval.run.decode.seed = s;
        cfg.lab.seeds = vec![s];
    }
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(CliError::Config(problems));
    }
    let ctx = Context::new(cfg, cli.out, cli.config);
    match cli.command {
        Command::Ingest { input, format } => ctx.ingest(input, format),
        Command::Gendata => ctx.gendata(),
        Command::Build { method } => ctx.build(method),
        Command::Train { method } => ctx.train(method),
        Command::Eval { methods } => ctx.eval(methods),
        Command::Lab { null_control } => ctx.lab(null_control),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SIU_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Config(all) => {
                    eprintln!("config error ({} problem{}):", all.len(), if all.len() == 1 { "" } else { "s" });
                    for p in all {
                        eprintln!("  - {p}");
                    }
                }
                other => eprintln!("error: {other}"),
            }
            ExitCode::from(e.code())
        }
    }
}
