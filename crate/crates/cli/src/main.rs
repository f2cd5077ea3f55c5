mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use mgcot::error::MgcotError;

use args::{Cli, Command};

/// Failure classes with distinct exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitClass {
    Config = 2,
    Io = 3,
    Runtime = 4,
}

/// An error tagged with its exit class.
#[derive(Debug)]
pub struct Failure {
    pub class: ExitClass,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn config(msg: impl std::fmt::Display) -> Self {
        Failure {
            class: ExitClass::Config,
            error: anyhow::anyhow!("{msg}"),
        }
    }

    pub fn io(msg: impl std::fmt::Display) -> Self {
        Failure {
            class: ExitClass::Io,
            error: anyhow::anyhow!("{msg}"),
        }
    }
}

impl From<MgcotError> for Failure {
    fn from(e: MgcotError) -> Self {
        let class = match &e {
            MgcotError::Config(_) | MgcotError::Parse { .. } => ExitClass::Config,
            MgcotError::Io { .. }
            | MgcotError::Integrity(_)
            | MgcotError::CheckpointVersion { .. }
            | MgcotError::Schema(_) => ExitClass::Io,
            _ => ExitClass::Runtime,
        };
        Failure {
            class,
            error: e.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        match error.downcast::<MgcotError>() {
            Ok(e) => e.into(),
            Err(error) => Failure {
                class: ExitClass::Runtime,
                error,
            },
        }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet {
        "warn"
    } else {
        "info"
    }))
    .format_timestamp(None)
    .init();

    let result = match cli.command {
        Command::Preprocess(a) => commands::preprocess(a),
        Command::Synth(a) => commands::synth(a),
        Command::BuildGraphs(a) => commands::build_graphs(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.class as u8)
        }
    }
}
