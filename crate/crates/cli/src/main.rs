use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ersc::harness::{self, write_report, ExperimentConfig, Format, Report};
use ersc::Error;

#[derive(Parser)]
#[command(name = "ersc", version, about = "Ergodic risk-sensitive control toolkit for many-server queues")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prelimit optimal values against the diffusion value.
    AoTable(Common),
    /// Tilted prelimit payoff against the occupation integral.
    LowerBound(Common),
    /// Value, excursions and drift certificate of the near-optimal policy.
    UpperBound(Common),
    /// Random tilt batteries for the variational lower bounds.
    Variational(Common),
    /// Closed-form FCLT sweep.
    Fclt(Common),
    /// Lyapunov drift certificates.
    DriftCheck(Common),
    /// One prelimit path.
    Simulate(Common),
}

#[derive(Args)]
struct Common {
    /// TOML file with a [params] table and an optional [experiment] table;
    /// the reference instance when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv or txt.
    #[arg(long, default_value = "txt")]
    format: String,
}

type Runner = fn(&ExperimentConfig) -> Result<Report, Error>;

fn run(cli: Cli) -> Result<(), Error> {
    let (common, runner): (&Common, Runner) = match &cli.command {
        Command::AoTable(c) => (c, harness::ao_table),
        Command::LowerBound(c) => (c, harness::lowerbound_pipeline),
        Command::UpperBound(c) => (c, harness::upperbound_pipeline),
        Command::Variational(c) => (c, |cfg| harness::variational_battery(cfg).map(|(r, _)| r)),
        Command::Fclt(c) => (c, harness::fclt_sweep),
        Command::DriftCheck(c) => (c, harness::drift_check),
        Command::Simulate(c) => (c, harness::simulate_run),
    };
    let format: Format = common.format.parse()?;
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::reference(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    let report = runner(&cfg)?;
    let preamble = cfg.preamble();
    match &common.out {
        Some(path) => harness::emit(&report, path, format, &preamble),
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write_report(&report, &mut lock, format, &preamble)
                .and_then(|_| lock.flush())
                .map_err(|source| Error::Io {
                    path: PathBuf::from("<stdout>"),
                    source,
                })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
