//! `volsup` — batch front end for the pricing and superhedging engine.
//!
//! Exit codes: 0 all asserted invariants pass, 1 an invariant failed,
//! 2 an enumeration/lattice cap refused the run, 3 configuration error.

mod config;
mod report;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{parse_config, Mode};
use run::{emit, execute, RunError};

#[derive(Parser)]
#[command(
    name = "volsup",
    about = "Worst-case pricing and superhedging on volatility-band trees",
    version
)]
struct Cli {
    #[command(subcommand)]
    mode: ModeCommand,
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Write the JSON report here (overrides the config's out.report).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cap the rayon worker pool.
    #[arg(long)]
    threads: Option<usize>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum ModeCommand {
    /// Worst-case price by backward recursion (with oracle cross-check when
    /// enumerable).
    Price(CommonArgs),
    /// Minimal superhedge and pathwise verification.
    Hedge(CommonArgs),
    /// Price vs superhedging capital and the duality gap.
    VerifyDuality(CommonArgs),
    /// Conditioning / pasting / mixing closure of the scenario set.
    CheckConditions(CommonArgs),
    /// Monte Carlo scenario simulation (statistical lower bounds).
    Simulate(CommonArgs),
    /// Fine lattice against the finite-difference solver.
    PdeCrosscheck(CommonArgs),
}

impl ModeCommand {
    fn split(self) -> (Mode, CommonArgs) {
        match self {
            ModeCommand::Price(a) => (Mode::Price, a),
            ModeCommand::Hedge(a) => (Mode::Hedge, a),
            ModeCommand::VerifyDuality(a) => (Mode::VerifyDuality, a),
            ModeCommand::CheckConditions(a) => (Mode::CheckConditions, a),
            ModeCommand::Simulate(a) => (Mode::Simulate, a),
            ModeCommand::PdeCrosscheck(a) => (Mode::PdeCrosscheck, a),
        }
    }
}

const EXIT_INVARIANT: u8 = 1;
const EXIT_CAP: u8 = 2;
const EXIT_CONFIG: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (mode, args) = cli.mode.split();

    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("config error: cannot read {}: {e}", args.config.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let mut config = match parse_config(&text) {
        Ok(c) => c,
        Err(errors) => {
            for error in &errors {
                eprintln!("config error: {error}");
            }
            eprintln!("{} config error(s)", errors.len());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if config.mode != mode {
        eprintln!(
            "config error: subcommand \"{}\" does not match config mode \"{}\"",
            mode.as_str(),
            config.mode.as_str()
        );
        return ExitCode::from(EXIT_CONFIG);
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.out {
        config.out.report = Some(out.display().to_string());
    }
    if let Some(threads) = args.threads {
        // a no-op if a global pool already exists; worker count never
        // affects reported values
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }

    let report = match execute(&config) {
        Ok(r) => r,
        Err(RunError::Cap(msg)) => {
            eprintln!("cap refusal: {msg}");
            return ExitCode::from(EXIT_CAP);
        }
        Err(RunError::Failed(msg)) => {
            eprintln!("run failed: {msg}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let out_path = config.out.report.clone();
    if let Err(e) = emit(&report, out_path.as_deref()) {
        eprintln!("{e}");
        return ExitCode::from(EXIT_CONFIG);
    }
    for check in &report.checks {
        if !check.pass {
            eprintln!(
                "invariant failed: {} measured {} against {}",
                check.name, check.measured, check.tolerance
            );
        }
    }
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_INVARIANT)
    }
}
