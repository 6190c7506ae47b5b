mod args;
mod commands;
mod output;

use std::process::ExitCode;

use clap::Parser;
use thiserror::Error;

use args::{Cli, Command};
use commands::Outcome;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] randshift::Error),
}

impl CliError {
    /// Parameter and model errors are configuration errors.
    pub fn from_core(e: randshift::Error) -> Self {
        match e {
            randshift::Error::InvalidParameter(m) => CliError::Config(m),
            randshift::Error::UnknownModel(m) => CliError::Config(format!("unknown model `{m}`")),
            other => CliError::Core(other),
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 4,
            CliError::Io(_) => 1,
            CliError::Core(randshift::Error::InvalidParameter(_) | randshift::Error::UnknownModel(_)) => 4,
            CliError::Core(_) => 3,
        }
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("RANDSHIFT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| CliError::Config(format!("RANDSHIFT_THREADS = `{v}` is not a count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = init_threads().and_then(|_| match &cli.command {
        Command::Check(a) => commands::run("check", a),
        Command::Conformal(a) => commands::run("conformal", a),
        Command::Density(a) => commands::run("density", a),
        Command::Gap(a) => commands::run("gap", a),
        Command::Correlations(a) => commands::run("correlations", a),
        Command::Clt(a) => commands::run("clt", a),
        Command::Constants(a) => commands::run("constants", a),
        Command::Models(a) => commands::models(a),
    });
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::ConditionFailure) => ExitCode::from(2),
        Ok(Outcome::ConvergenceFailure) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
