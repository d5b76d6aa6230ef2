//! Benchmark runner.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use oct_node::bench::{self, Suite};
use oct_node::NodeError;

#[derive(Parser)]
#[command(name = "octbench", about = "Measure lookup latency and throughput")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every scenario in a scenario file.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the summary here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Measurement window per scenario (overrides `duration_s`).
        #[arg(long)]
        duration_s: Option<f64>,
    },
}

fn run(cli: Cli) -> Result<(), NodeError> {
    let Cmd::Run {
        scenario,
        out,
        report,
        duration_s,
    } = cli.cmd;
    let mut suite = Suite::load(&scenario)?;
    if let Some(d) = duration_s {
        suite.duration = Duration::from_secs_f64(d);
    }
    let mut runs = Vec::new();
    for s in &suite.scenarios {
        log::info!("running [{}]: {} client(s), {}", s.id, s.clients, bench::toggles(&s.config));
        match bench::run_scenario(&suite, s) {
            Ok(m) => runs.push(m),
            Err(e) => log::warn!("[{}] did not run: {e}", s.id),
        }
    }
    let runs = bench::valid_runs(runs);
    bench::write_csv(std::fs::File::create(&out)?, &runs)?;
    let text = bench::report(&suite, &runs);
    print!("{text}");
    if let Some(p) = report {
        std::fs::write(p, &text)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    common::init_logging();
    let cli = match common::parse_args::<Cli>() {
        Ok(c) => c,
        Err(code) => return code,
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => common::fail(&e),
    }
}
