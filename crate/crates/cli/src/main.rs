//! `scf`: train, evaluate and compare conversation-forest policies on the
//! simulated clinic, analyse question text, and export training data.

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use commands::Cli;

/// Marks errors caused by invalid flags or config values (exit status 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn is_config_error(err: &anyhow::Error) -> bool {
    use scf_core::forest::ForestError;
    use scf_core::trainer::TrainError;
    use scf_gateway::GatewayError;
    err.chain().any(|e| {
        e.is::<ConfigError>()
            || matches!(e.downcast_ref::<TrainError>(), Some(TrainError::Config(_)))
            || matches!(e.downcast_ref::<ForestError>(), Some(ForestError::Config(_)))
            || matches!(
                e.downcast_ref::<GatewayError>(),
                Some(GatewayError::Config(_) | GatewayError::Template { .. })
            )
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if is_config_error(&err) { 2 } else { 1 })
        }
    }
}
