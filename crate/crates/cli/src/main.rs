//! `rarevent`: experiment driver. Every run writes into a fresh directory
//! and records its resolved config, seed and artifact hashes in `run.json`.

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

mod commands;
mod config;
mod error;
mod run;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use commands::{CamRequest, Context, Outcome, SweepKind};
use config::ExperimentConfig;
use error::CliError;
use rarevent_core::types::FrameRef;
use run::RunDir;

#[derive(Parser)]
#[command(name = "rarevent", version, about = "Rare-event frame detection experiments")]
struct Cli {
    /// JSON experiment config; unset fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; must be new or empty.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Use a dataset written by `gen-data` instead of generating one.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Train the configured method with one fold held out.
    Train {
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Cross-validate each configured method.
    Eval,
    /// Cross-validate over margins or embedding sizes, or sweep imbalance degrees.
    Sweep {
        #[arg(long, value_enum)]
        kind: SweepKind,
    },
    /// Class activation maps for a trained checkpoint on its held-out fold.
    Cam {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Fold whose procedures the checkpoint did not see.
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Galleries to write.
        #[arg(long, value_enum, value_delimiter = ',', default_value = "tp,fp,fn")]
        select: Vec<Outcome>,
        /// Extra frames as `procedure:frame`, repeatable.
        #[arg(long = "frame", value_parser = commands::parse_frame)]
        frames: Vec<FrameRef>,
    },
    /// Print the resolved config as JSON.
    ShowConfig,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval => "eval",
            Command::Sweep { .. } => "sweep",
            Command::Cam { .. } => "cam",
            Command::ShowConfig => "show-config",
        }
    }

    fn arguments(&self, data: Option<&Path>) -> BTreeMap<String, Value> {
        let mut args = BTreeMap::new();
        match self {
            Command::Train { fold } => {
                args.insert("fold".into(), json!(fold));
            }
            Command::Sweep { kind } => {
                args.insert("kind".into(), json!(kind.name()));
            }
            Command::Cam {
                checkpoint,
                fold,
                select,
                frames,
            } => {
                args.insert("checkpoint".into(), json!(checkpoint.display().to_string()));
                args.insert("fold".into(), json!(fold));
                let select: Vec<String> = select.iter().map(|o| format!("{o:?}").to_lowercase()).collect();
                args.insert("select".into(), json!(select));
                let frames: Vec<String> = frames.iter().map(|f| format!("{}:{}", f.procedure_id, f.frame_index)).collect();
                args.insert("frames".into(), json!(frames));
            }
            _ => {}
        }
        if let Some(d) = data {
            args.insert("data".into(), json!(d.display().to_string()));
        }
        args
    }
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let config = base.resolve(cli.seed);
    config.validate()?;
    Ok(config)
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let config = resolve_config(cli)?;
    if let Command::ShowConfig = cli.command {
        println!("{}", serde_json::to_string_pretty(&config).map_err(CliError::runtime)?);
        return Ok(());
    }
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(CliError::runtime)?;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| config.out.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set \"out\"".into()))?;
    if let Command::Cam { checkpoint, .. } = &cli.command {
        if !checkpoint.is_file() {
            return Err(CliError::Config(format!("checkpoint {} does not exist", checkpoint.display())));
        }
    }
    let mut run = RunDir::create(&out)?;
    let data = if matches!(cli.command, Command::GenData) { None } else { cli.data.as_deref() };
    let prepared = commands::prepare_dataset(&config, data);
    let outcome = prepared.as_ref().map_err(Clone::clone).and_then(|(dataset, _)| {
        let mut ctx = Context {
            config: &config,
            run: &mut run,
            dataset,
        };
        match &cli.command {
            Command::GenData => commands::gen_data(&mut ctx),
            Command::Train { fold } => commands::train_one(&mut ctx, *fold),
            Command::Eval => commands::eval(&mut ctx),
            Command::Sweep { kind } => commands::sweep(&mut ctx, *kind),
            Command::Cam {
                checkpoint,
                fold,
                select,
                frames,
            } => commands::cam(
                &mut ctx,
                &CamRequest {
                    checkpoint: checkpoint.clone(),
                    fold: *fold,
                    select: select.clone(),
                    frames: frames.clone(),
                },
            ),
            Command::ShowConfig => unreachable!("handled above"),
        }
    });
    let source = prepared.as_ref().ok().map(|(_, s)| s);
    run.finish(cli.command.name(), &cli.command.arguments(data), &config, source, &outcome)?;
    outcome
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
