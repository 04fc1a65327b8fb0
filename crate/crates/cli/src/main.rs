mod cli;
mod commands;
mod config;
mod manifest;

use std::process::ExitCode;

use clap::Parser;
use immunofuse_core::Error;

use crate::cli::{Cli, Command};
use crate::config::RunConfig;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Audit(_) | Error::Stratification(_) => 2,
        Error::Numeric(_) | Error::DegenerateEmbedding { .. } => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = (|| -> immunofuse_core::Result<u8> {
        let mut cmd = cli.command;
        cmd.absolutize().map_err(|e| Error::io(".", e))?;
        if let Command::Replay(a) = &cmd {
            let diffs = commands::replay(&a.manifest, &a.out)?;
            if diffs.is_empty() {
                println!("replay reproduced all outputs");
                return Ok(0);
            }
            for d in &diffs {
                eprintln!("{d}");
            }
            return Ok(2);
        }
        let mut cfg = RunConfig::load(cli.config.as_deref())?;
        cfg.apply_env()?;
        let cfg = commands::resolve(&cmd, cfg)?;
        log::info!("running {}", cmd.name());
        commands::run(&cmd, &cfg)?;
        Ok(0)
    })();

    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
