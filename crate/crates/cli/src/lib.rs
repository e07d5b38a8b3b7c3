//! Command-line front end for the agentsynth pipeline.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration or input error,
//! 3 provider/transport error, 4 unparseable model output, 5 `run` hit its
//! step limit.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use agentsynth::runtime::Mode;
use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::RunOptions;
use crate::config::{Overrides, PipelineConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "agentsynth", version, about = "Synthesize, filter, index and use agent training data")]
pub struct Cli {
    /// Pipeline config file.
    #[arg(long, global = true, default_value = "agentsynth.toml")]
    pub config: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// `mock` or a provider id from the config.
    #[arg(long, global = true)]
    pub provider: Option<String>,
    /// Override any config value, e.g. `--set runtime.max_steps=7`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Propose instructions, roll them out and build examples.
    Synth,
    /// Deduplicate states and keep examples the committee approves.
    Filter,
    /// Build the sparse and dense indexes over filtered examples.
    Index,
    /// Act in a world on one instruction and write a trace.
    Run {
        #[arg(long)]
        instruction: String,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        world: Option<String>,
        /// Trace output path (default: <out_dir>/trace.jsonl).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Write supervised fine-tuning pairs.
    Export,
    /// Print dataset counts.
    Stats {
        #[arg(long)]
        json: bool,
    },
    /// Write a runnable demo project (config, documents, worlds, mock table).
    InitDemo {
        dir: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    ZeroShot,
    AgenticRetrieval,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::ZeroShot => Mode::ZeroShot,
            ModeArg::AgenticRetrieval => Mode::AgenticRetrieval,
        }
    }
}

fn configure_threads(jobs: usize) {
    if jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            log::debug!("thread pool already configured: {e}");
        }
    }
}

pub fn execute(cli: Cli, stdout: &mut dyn Write) -> Result<i32, CliError> {
    if let Command::InitDemo { dir, force } = &cli.command {
        return commands::init_demo(dir, *force);
    }
    let overrides = Overrides {
        seed: cli.seed,
        jobs: cli.jobs,
        provider: cli.provider.clone(),
        set: cli.set.clone(),
    };
    let config = PipelineConfig::load(&cli.config, &overrides)?;
    configure_threads(config.jobs);
    match cli.command {
        Command::Synth => commands::cmd_synth(&config),
        Command::Filter => commands::cmd_filter(&config),
        Command::Index => commands::cmd_index(&config),
        Command::Export => commands::cmd_export(&config),
        Command::Stats { json } => commands::cmd_stats(&config, json, stdout),
        Command::Run {
            instruction,
            mode,
            world,
            trace,
        } => commands::cmd_run(
            &config,
            &RunOptions {
                instruction,
                mode: mode.map(Into::into),
                world,
                trace,
            },
            stdout,
        ),
        Command::InitDemo { .. } => unreachable!(),
    }
}

fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().as_str().to_lowercase(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .target(env_logger::Target::Stderr)
        .try_init();
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { error::EXIT_CONFIG } else { error::EXIT_OK };
        }
    };
    init_logging();
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(cli, &mut lock) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            e.exit_code()
        }
    }
}
