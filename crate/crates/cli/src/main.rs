use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use spikedistill_cli::commands::{self, Run};
use spikedistill_cli::config::RunConfig;
use spikedistill_cli::exit_code;

#[derive(Parser)]
#[command(name = "spikedistill", version, about = "Train, convert and distill spiking networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Config file (`key = value` lines, `[section]` headers allowed).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Sets one config key; may be repeated. Applied after the config file.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher ANN.
    TrainTeacher,
    /// Train the convertible intermediate ANN.
    TrainIntermediate,
    /// Balance thresholds and convert the intermediate ANN into a spiking student.
    Convert {
        /// Defaults to `<out>/intermediate.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fine-tune the student with attention distillation (hybrid when alpha = 0).
    Distill {
        /// Defaults to `<out>/teacher.ckpt`.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Defaults to `<out>/student.ckpt`.
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Accuracy of any checkpoint, plus the spike report for spiking ones.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Spike report of a spiking checkpoint.
    EnergyReport {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

impl Command {
    fn verb(&self) -> &'static str {
        match self {
            Command::TrainTeacher => "train-teacher",
            Command::TrainIntermediate => "train-intermediate",
            Command::Convert { .. } => "convert",
            Command::Distill { .. } => "distill",
            Command::Evaluate { .. } => "evaluate",
            Command::EnergyReport { .. } => "energy-report",
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(s) = cli.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(o) = &cli.out {
        cfg.set("out", &o.to_string_lossy())?;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    let run = Run::start(resolve(&cli)?, cli.command.verb())?;
    match &cli.command {
        Command::TrainTeacher => {
            commands::train_teacher(&run)?;
        }
        Command::TrainIntermediate => {
            commands::train_intermediate(&run)?;
        }
        Command::Convert { checkpoint } => {
            let ck = checkpoint.clone().unwrap_or_else(|| run.out.join("intermediate.ckpt"));
            commands::convert(&run, &ck)?;
        }
        Command::Distill { teacher, student } => {
            let t = teacher.clone().unwrap_or_else(|| run.out.join("teacher.ckpt"));
            let s = student.clone().unwrap_or_else(|| run.out.join("student.ckpt"));
            commands::distill(&run, &t, &s)?;
        }
        Command::Evaluate { checkpoint } => {
            commands::evaluate(&run, checkpoint)?;
        }
        Command::EnergyReport { checkpoint } => {
            commands::energy_report(&run, checkpoint)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
