mod args;
mod commands;
mod config;

use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;

use args::{Cli, Command};
use config::{Echo, FileConfig};

// Training allocates and frees hundreds of megabytes of activations per step.
// The system allocator hands those blocks back to the OS on every free and
// faults them in again on the next step; mimalloc keeps them.
#[global_allocator]
static ALLOCATOR: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn echo(run: &impl Echo) {
    eprintln!("# resolved config\n{}", run.echo().trim_end());
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Prep(a) => {
            let run = config::resolve_prep(
                a,
                FileConfig::load_optional(cli.config.as_deref())?,
                cli.seed,
            )?;
            echo(&run);
            commands::prep(&run)
        }
        Command::Train(a) => {
            let path = a.config_path.as_deref().or(cli.config.as_deref());
            let run = config::resolve_train(a, FileConfig::load_optional(path)?, cli.seed)?;
            echo(&run);
            commands::train(&run, a.resume)
        }
        Command::Fuse(a) => {
            let run = config::resolve_fuse(
                a,
                FileConfig::load_optional(cli.config.as_deref())?,
                cli.seed,
            )?;
            echo(&run);
            commands::fuse(&run)
        }
        Command::Eval(a) => {
            let run = config::resolve_eval(
                a,
                FileConfig::load_optional(cli.config.as_deref())?,
                cli.seed,
            )?;
            echo(&run);
            commands::eval(&run)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
