use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use travelsim::pipeline::{validate_config, RunConfig, Runner, Stage};

#[derive(Parser)]
#[command(
    name = "travelsim",
    about = "Staged agent-based travel demand pipeline",
    version
)]
struct Cli {
    /// Path to the run configuration (TOML).
    #[arg(short, long, global = true, default_value = "run.toml")]
    config: PathBuf,

    /// Override the global random seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory from the config.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the agent population from survey microdata.
    Synth,
    /// Generate persona descriptions for all agents.
    Personas,
    /// Generate and validate daily activity schedules.
    Schedules,
    /// Build the location catalog and per-trip route options.
    Routes,
    /// Ask the backend for a mode decision per trip and repair it.
    Modes,
    /// Load decided car trips onto the road network.
    Assign,
    /// Compute validation indicators against reference datasets.
    Evaluate,
    /// Run every stage in order.
    RunAll,
    /// Check the configuration and report violations without running.
    Validate,
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_STAGE: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();

    let mut cfg = match RunConfig::load(&cli.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    if let Some(seed) = cli.seed {
        cfg.global_seed = seed;
    }
    if let Some(dir) = cli.output_dir {
        cfg.output_dir = dir;
    }

    let violations = validate_config(&cfg);
    if let Command::Validate = cli.command {
        if violations.is_empty() {
            println!("configuration ok");
            return ExitCode::SUCCESS;
        }
        for v in &violations {
            println!("violation: {v}");
        }
        return ExitCode::from(EXIT_VALIDATION);
    }
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("violation: {v}");
        }
        return ExitCode::from(EXIT_VALIDATION);
    }

    let mut runner = match Runner::new(cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_STAGE);
        }
    };

    let stages: Vec<Stage> = match cli.command {
        Command::Synth => vec![Stage::Synth],
        Command::Personas => vec![Stage::Personas],
        Command::Schedules => vec![Stage::Schedules],
        Command::Routes => vec![Stage::Routes],
        Command::Modes => vec![Stage::Modes],
        Command::Assign => vec![Stage::Assign],
        Command::Evaluate => vec![Stage::Evaluate],
        Command::RunAll => Stage::ALL.to_vec(),
        Command::Validate => unreachable!("handled above"),
    };

    for stage in stages {
        match runner.run_stage(stage) {
            Ok(true) => println!("stage {}: done", stage.name()),
            Ok(false) => println!("stage {}: skipped (up to date)", stage.name()),
            Err(e) => {
                eprintln!("stage {} failed: {e}", stage.name());
                return ExitCode::from(EXIT_STAGE);
            }
        }
    }
    ExitCode::SUCCESS
}
