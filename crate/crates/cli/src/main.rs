mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::{RunContext, Format, InitMode};
use config::Config;
use output::OutDir;

#[derive(Parser)]
#[command(name = "dmac", about = "Delay-constrained rate scheduling and power allocation on a two-user multiple-access channel")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimal one-slot power allocation, with outage audit.
    Alloc(Common),
    /// Alternate scheduler and allocation optimization for D_max > 1.
    Iteropt(Common),
    /// Monte Carlo run of the configured scheduler.
    Simulate(Common),
    /// Centralized, decentralized and time-division averages.
    Baselines(Common),
    /// Long-format CSV over the configured sweep axis.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Overrides `sim.seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = InitMode::Unitdelay)]
    init: InitMode,
    /// Format of the summary printed to stdout.
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

type Handler = fn(&Config, &RunContext) -> Result<bool>;

fn dispatch(cli: Cli) -> Result<bool> {
    let (common, run): (Common, Handler) = match cli.command {
        Command::Alloc(c) => (c, commands::cmd_alloc),
        Command::Iteropt(c) => (c, |cfg, ctx| commands::cmd_iteropt(cfg, ctx).map(|_| true)),
        Command::Simulate(c) => (c, |cfg, ctx| commands::cmd_simulate(cfg, ctx).map(|_| true)),
        Command::Baselines(c) => (c, |cfg, ctx| commands::cmd_baselines(cfg, ctx).map(|_| true)),
        Command::Sweep(c) => (c, |cfg, ctx| commands::cmd_sweep(cfg, ctx).map(|_| true)),
    };
    let cfg = Config::load(&common.config)?;
    let ctx = RunContext {
        out: OutDir::create(&common.out)?,
        seed: common.seed,
        init: common.init,
        format: common.format,
    };
    run(&cfg, &ctx)
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
