//! Batch front end for the emulation and calibration pipeline.
//!
//! Global flags can also be set through `SSGP_CONFIG`, `SSGP_SEED`,
//! `SSGP_WORKERS` and `SSGP_OUT`; command-line values take precedence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ssgp::pipeline::{ModeName, Pipeline, PipelineConfig};
use ssgp::ssm::Smoother;
use ssgp::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ssgp",
    version,
    about = "Emulate and calibrate spatiotemporal simulators"
)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, env = "SSGP_CONFIG")]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true, env = "SSGP_SEED")]
    seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true, env = "SSGP_WORKERS")]
    workers: Option<usize>,
    /// Output directory; overrides `io.out_dir`.
    #[arg(long, global = true, env = "SSGP_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Spatial,
    Heterogeneous,
    PredictiveProcess,
}

impl From<Mode> for ModeName {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Spatial => ModeName::Spatial,
            Mode::Heterogeneous => ModeName::Heterogeneous,
            Mode::PredictiveProcess => ModeName::PredictiveProcess,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SmootherArg {
    Conditional,
    Literal,
}

#[derive(Subcommand)]
enum Command {
    /// Write the Latin hypercube design.
    Design,
    /// Run the simulator at every design point.
    Simulate,
    /// Simulate noisy field data at the held-out input.
    Field,
    /// Fit the emulator to the training ensemble.
    Fit {
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long, value_enum)]
        smoother: Option<SmootherArg>,
    },
    /// Calibrate against the field data with a fitted emulator.
    Calibrate {
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Emulator prediction at a raw-scale input.
    Predict {
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Comma-separated raw-scale input; the held-out input by default.
        #[arg(long, value_delimiter = ',')]
        eta: Option<Vec<f64>>,
    },
    /// Score every calibrated model against the field data.
    Score,
}

fn run(cli: Cli) -> Result<()> {
    let path = cli
        .config
        .ok_or_else(|| Error::Config("no configuration given (--config or SSGP_CONFIG)".into()))?;
    let mut config = PipelineConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    if let Command::Fit {
        smoother: Some(s), ..
    } = &cli.command
    {
        config.emulator.smoother = match s {
            SmootherArg::Conditional => Smoother::Conditional,
            SmootherArg::Literal => Smoother::Literal,
        };
    }
    let pipeline = Pipeline::new(config, cli.out)?;
    match cli.command {
        Command::Design => {
            let d = pipeline.design()?;
            eprintln!("design: {} runs x {} inputs", d.n_runs(), d.dims());
        }
        Command::Simulate => {
            let e = pipeline.simulate()?;
            eprintln!(
                "simulate: {} runs, {} times, {} locations",
                e.n_runs(),
                e.n_times(),
                e.n_sites()
            );
        }
        Command::Field => {
            let z = pipeline.field()?;
            eprintln!("field: {} times, {} locations", z.n_times(), z.n_sites());
        }
        Command::Fit { mode, .. } => {
            let d = pipeline.fit(mode.map(Into::into))?;
            eprintln!(
                "fit: {} draws kept, acceptance beta {:.3} omega {:.3}",
                d.len(),
                d.acceptance.beta,
                d.acceptance.omega
            );
        }
        Command::Calibrate { mode } => pipeline.calibrate(mode.map(Into::into))?,
        Command::Predict { mode, eta } => pipeline.predict(mode.map(Into::into), eta)?,
        Command::Score => {
            println!("model,GRS,RMSE,n_runs");
            for r in pipeline.score()? {
                println!("{},{},{},{}", r.model, r.grs, r.rmse, r.n_runs);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
