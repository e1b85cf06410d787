use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tpsr_cli::commands;
use tpsr_cli::config::{ExperimentConfig, Scale, SeedSection};
use tpsr_core::{Error, Result};

/// Learn TPSR models from action-observation data and plan in them.
#[derive(Parser)]
#[command(name = "tpsr", version)]
struct Cli {
    /// TOML config; keys it leaves out keep the preset value.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every stage, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "paper")]
    scale: Scale,
    /// Directory for artifacts; also where later stages look for earlier ones.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Break greedy action 2-cycles during evaluation.
    #[arg(long, global = true)]
    anti_stall: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Random-action exploration data.
    Collect,
    /// Fit features and learn a model from trajectories.
    Learn {
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
    /// Learn rewards and run Perseus over embedded histories.
    Plan {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
    /// Greedy episodes in the arena with random and A* baselines.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        value: Option<PathBuf>,
    },
    /// Sequence probabilities under a model.
    Predict {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Discrete pairs `a:o a:o ...`.
        #[arg(long, conflicts_with = "trajectories", required_unless_present = "trajectories")]
        sequence: Option<String>,
        /// Trajectory file; prints one probability per trajectory.
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p, cli.scale)?,
        None => ExperimentConfig::preset(cli.scale),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = SeedSection::from_root(s);
    }
    if cli.anti_stall {
        cfg.planner.anti_stall = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let out = &cli.out;
    let or = |p: &Option<PathBuf>, name: &str| p.clone().unwrap_or_else(|| out.join(name));
    match &cli.command {
        Command::Collect => {
            commands::collect(&load_config(cli)?, out)?;
        }
        Command::Learn { trajectories } => {
            commands::learn(&load_config(cli)?, &or(trajectories, commands::TRAJECTORIES), out)?;
        }
        Command::Plan { model, trajectories } => {
            let cfg = load_config(cli)?;
            commands::plan(
                &cfg,
                &or(model, commands::MODEL),
                &or(trajectories, commands::TRAJECTORIES),
                out,
            )?;
        }
        Command::Eval { model, value } => {
            let cfg = load_config(cli)?;
            commands::eval(&cfg, &or(model, commands::MODEL), &or(value, commands::VALUE), out)?;
        }
        Command::Predict {
            model,
            sequence,
            trajectories,
        } => {
            let model = or(model, commands::MODEL);
            match (sequence, trajectories) {
                (Some(s), _) => println!("{}", commands::predict_discrete(&model, s)?),
                (None, Some(t)) => {
                    for p in commands::predict_trajectories(&model, Path::new(t))? {
                        println!("{p}");
                    }
                }
                (None, None) => return Err(Error::InvalidArgument("give --sequence or --trajectories".into())),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tpsr: error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
