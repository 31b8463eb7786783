mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use config::{Cli, Command, FileConfig, Layer};

/// 1 for failures during computation, 2 for configuration and plugin errors.
#[derive(Debug)]
pub enum CliError {
    Compute(String),
    Config(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Compute(_) => 1,
            CliError::Config(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Compute(m) => write!(f, "error: {m}"),
            CliError::Config(m) => write!(f, "configuration error: {m}"),
        }
    }
}

/// Resolved global settings.
pub struct Global {
    pub out: PathBuf,
    pub jobs: usize,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let global = Global {
        out: cli.out.or(file.out).unwrap_or_else(|| PathBuf::from("mad-out")),
        jobs: cli.jobs.or(file.jobs).unwrap_or(1),
    };
    if global.jobs == 0 {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    match cli.command {
        Command::Generate(g) => commands::generate(&global, g.over(file.generate)),
        Command::Evaluate(e) => commands::evaluate(&global, e.over(file.evaluate)),
        Command::Ablate { sweep, gen, eval } => commands::ablate(
            &global,
            sweep.over(file.ablate),
            gen.over(file.generate),
            eval.over(file.evaluate),
        ),
        Command::Bench { bench, gen } => commands::bench(&global, bench.over(file.bench), gen.over(file.generate)),
        Command::Train(t) => commands::train(&global, t.over(file.train)),
        Command::Replay(r) => commands::replay(&global, r),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
