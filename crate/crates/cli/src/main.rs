use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use stcast_cli::{cmd_fit_grid, cmd_forecast, cmd_map, cmd_simulate, CliError, MapPeriod, Report, RunConfig};

#[derive(Parser)]
#[command(name = "stcast", version, about = "Spatio-temporal count forecasting")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed (and the simulation seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Verb {
    /// Write a synthetic dataset with known truth.
    Simulate(Common),
    /// Fit every grid entry and write comparison.csv plus fit bundles.
    FitGrid(Common),
    /// Forecast the test window and score it against baselines.
    Forecast {
        #[command(flatten)]
        common: Common,
        /// Defaults to the lowest-DIC fitted model.
        #[arg(long)]
        model_id: Option<String>,
    },
    /// Write a GeoJSON map of predicted RR and percentage error.
    Map {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model_id: Option<String>,
        /// `test` or a training year.
        #[arg(long, default_value = "test")]
        period: String,
    },
}

fn setup(c: &Common) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
        if let Some(sim) = cfg.simulate.as_mut() {
            sim.seed = seed;
        }
    }
    let out = match (&c.out, &cfg.out_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => cfg.resolve(o),
        (None, None) => return Err(CliError::Config("no output directory: pass --out or set out_dir".into())),
    };
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<(Report, PathBuf), CliError> {
    match &cli.verb {
        Verb::Simulate(c) => {
            let (cfg, out) = setup(c)?;
            Ok((cmd_simulate(&cfg, &out)?, out))
        }
        Verb::FitGrid(c) => {
            let (cfg, out) = setup(c)?;
            Ok((cmd_fit_grid(&cfg, &out)?.1, out))
        }
        Verb::Forecast { common, model_id } => {
            let (cfg, out) = setup(common)?;
            Ok((cmd_forecast(&cfg, &out, model_id.as_deref())?, out))
        }
        Verb::Map { common, model_id, period } => {
            let (cfg, out) = setup(common)?;
            let period: MapPeriod = period.parse().map_err(CliError::Config)?;
            Ok((cmd_map(&cfg, &out, model_id.as_deref(), period)?, out))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli).context("stcast") {
        Ok((report, out)) => {
            for n in &report.notes {
                println!("{n}");
            }
            for f in &report.outputs {
                println!("wrote {}", out.join(f).display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CliError>().map_or(1, CliError::exit_code);
            ExitCode::from(code)
        }
    }
}
