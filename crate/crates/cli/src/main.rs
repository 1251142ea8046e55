//! `attrgate`: task generation, training, attribution, priors, continual
//! runs, the similarity study and the summary report, all driven by one
//! JSON config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use attrgate_core::tasks::TaskKind;
use attrgate_core::trainer::TrainMode;
use attrgate_core::Error;

use commands::{CliError, CliResult, Layout};
use config::{Overrides, RunConfig};

const THREADS_ENV: &str = "ATTRGATE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "attrgate", version, about = "Relevance-based parameter attribution and attribution-gated continual fine-tuning")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; replaces the model, training and task seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    gate: Option<OnOff>,
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated task names, e.g. `copy,reverse`.
    #[arg(long, global = true, value_delimiter = ',')]
    task_order: Option<Vec<String>>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/eval splits for every configured task.
    GenTasks,
    /// Train one model per task from the same initialization.
    TrainSingle {
        /// Full checkpoint to fine-tune from (LoRA mode attaches adapters).
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Relevance maps of correctly generated samples under each single-task model.
    Attribute,
    /// Importance prior of each task from its single-task model.
    Prior,
    /// Sequential fine-tuning over the task order, gated or naive.
    TrainContinual {
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Importance similarity between tasks, independent versus sequential.
    Study,
    /// Collate continual records and the study into one summary.
    Report,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Full,
    Lora,
}

fn config_error(field: &str, reason: impl Into<String>) -> CliError {
    CliError::Core(Error::Config { field: field.into(), reason: reason.into() })
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let path = cli.config.as_ref().ok_or_else(|| config_error("config", "pass --config <path>"))?;
    let mut cfg = RunConfig::load(path)?;
    let task_order = match &cli.task_order {
        None => None,
        Some(names) => Some(
            names
                .iter()
                .map(|n| n.parse::<TaskKind>().map_err(|_| config_error("task_order", format!("unknown task `{n}`"))))
                .collect::<CliResult<Vec<_>>>()?,
        ),
    };
    let overrides = Overrides {
        seed: cli.seed,
        gate: cli.gate.map(|g| matches!(g, OnOff::On)),
        mode: cli.mode.map(|m| match m {
            Mode::Full => TrainMode::Full,
            Mode::Lora => TrainMode::Lora,
        }),
        out: cli.out.clone(),
        task_order,
    };
    cfg.apply(&overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| config_error(THREADS_ENV, format!("expected a positive integer, found `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| config_error(THREADS_ENV, e.to_string()))
}

fn run(cli: &Cli) -> CliResult<()> {
    configure_threads()?;
    let cfg = resolve(cli)?;
    let layout = Layout::new(cfg.out_dir()?);
    match &cli.command {
        Command::GenTasks => commands::gen_tasks(&cfg, &layout),
        Command::TrainSingle { base } => commands::train_single(&cfg, &layout, base.as_deref()),
        Command::Attribute => commands::attribute(&cfg, &layout),
        Command::Prior => commands::prior(&cfg, &layout),
        Command::TrainContinual { base } => commands::train_continual_cmd(&cfg, &layout, base.as_deref()),
        Command::Study => commands::study(&cfg, &layout),
        Command::Report => commands::report(&cfg, &layout),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
