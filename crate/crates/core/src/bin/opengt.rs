use std::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use opengt::engine::{run, EngineOptions};
use opengt::oracle::{simulate, trace_deviation};
use opengt::output::{emit_metadata, emit_metrics, emit_trace, Metadata};
use opengt::scenario::{default_scenario, load_scenario, read_scenario};

/// Largest engine/oracle disagreement accepted by `--oracle-check`.
const ORACLE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Parser)]
#[command(
    name = "opengt",
    version,
    about = "Gradient tracking with agents joining and leaving"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and write trace.csv, metrics.csv and meta.json.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, required_unless_present = "validate_only")]
        out: Option<PathBuf>,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Compare every round against the stacked matrix recursion.
        #[arg(long)]
        oracle_check: bool,
        /// Stop after validation.
        #[arg(long)]
        validate_only: bool,
    },
    /// Print the exact diameter of a scenario's graph.
    Diameter {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Write the shipped seven-agent scenario.
    DefaultScenario { path: PathBuf },
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("opengt: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(command: Command) -> Result<(), Box<dyn Error>> {
    match command {
        Command::Run {
            scenario,
            out,
            seed,
            oracle_check,
            validate_only,
        } => {
            let validated = load_scenario(&scenario)?;
            for w in &validated.warnings {
                eprintln!("warning: {w}");
            }
            if validate_only {
                println!(
                    "{}: ok (n = {}, lambda = {}, gamma = {})",
                    scenario.display(),
                    validated.graph.node_count(),
                    validated.graph.diameter_bound(),
                    validated.gamma
                );
                return Ok(());
            }
            let out = out.expect("clap requires --out");
            let experiment = validated.experiment(seed);
            let trace = run(&experiment, EngineOptions::default())?;

            if oracle_check {
                let states = simulate(&experiment)?;
                let deviation = trace_deviation(&trace, &states);
                if let Some((round, d)) = deviation
                    .iter()
                    .enumerate()
                    .find(|(_, d)| !(**d <= ORACLE_TOLERANCE))
                {
                    return Err(format!(
                        "oracle check failed at round {round}: deviation {d:e} > {ORACLE_TOLERANCE:e}"
                    )
                    .into());
                }
                let worst = deviation.iter().copied().fold(0.0, f64::max);
                println!("oracle check passed, max deviation {worst:e}");
            }

            std::fs::create_dir_all(&out)?;
            emit_trace(&trace, out.join("trace.csv"))?;
            emit_metrics(&trace, out.join("metrics.csv"))?;
            emit_metadata(
                &Metadata {
                    name: validated.scenario.name.clone(),
                    seed: trace.seed,
                    gamma: trace.gamma,
                    lambda: trace.lambda,
                    rounds: experiment.rounds,
                },
                out.join("meta.json"),
            )?;
            let last = trace.records.last().expect("at least round 0");
            for c in &last.clusters {
                println!(
                    "round {}: cluster {} size {} minimizer {} error {:e}",
                    last.round,
                    c.index,
                    c.members.len(),
                    c.minimizer,
                    c.error
                );
            }
            Ok(())
        }
        Command::Diameter { scenario } => {
            println!("{}", read_scenario(&scenario)?.graph.exact_diameter()?);
            Ok(())
        }
        Command::DefaultScenario { path } => {
            let text = serde_json::to_string_pretty(&default_scenario())?;
            std::fs::write(&path, text + "\n")?;
            Ok(())
        }
    }
}
