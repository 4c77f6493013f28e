use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use rtpl_core::dynamics::{PendulumParams, PendulumPlant};
use rtpl_core::io::{read_file, trace_from_csv, trace_to_csv, write_file, SnapshotFile};
use rtpl_core::scenario::{self, ConfigOverrides};
use rtpl_core::{Column, Error, Metrics, ScenarioId};

/// Neural-network learning control experiments on an inverted pendulum.
#[derive(Parser)]
#[command(name = "rtpl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario (A, B, C, D or custom) and write traces, snapshots and a manifest.
    Run {
        scenario: ScenarioId,
        #[arg(long)]
        column: Option<Column>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Learning phase length in seconds.
        #[arg(long)]
        duration: Option<f64>,
        /// TOML configuration; command-line flags take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Drive a frozen feedforward from a snapshot along a trajectory.
    Replay {
        #[arg(long)]
        snapshot: PathBuf,
        /// sinusoid | growing_sinusoid | spline:SEED[:KNOTS], optionally @SECONDS.
        #[arg(long)]
        trajectory: String,
        /// Pendulum half length.
        #[arg(long, default_value_t = 0.2)]
        half_length: f64,
        #[arg(long, default_value_t = 0.005)]
        dt: f64,
        /// Write the trace CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the error metrics of a trace CSV.
    Metrics {
        #[arg(long)]
        trace: PathBuf,
    },
}

/// Configuration problems exit with 2, failed runs with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Parse { .. } | Error::InvalidArgument(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            scenario,
            column,
            seed,
            out,
            duration,
            config,
        } => run(
            config,
            ConfigOverrides {
                scenario: Some(scenario),
                column,
                seed,
                out,
                duration,
            },
        ),
        Command::Replay {
            snapshot,
            trajectory,
            half_length,
            dt,
            out,
        } => replay(snapshot, &trajectory, half_length, dt, out),
        Command::Metrics { trace } => metrics(trace),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(config: Option<PathBuf>, overrides: ConfigOverrides) -> anyhow::Result<()> {
    let text = match &config {
        Some(path) => read_file(path)?,
        None => String::new(),
    };
    let spec = scenario::resolve(&text, &overrides)?;
    let outcome = scenario::run_scenario(&spec)?;

    println!("scenario {} column {} -> {}", spec.id, spec.column, spec.out.display());
    println!("{:<12} {:>14} {:>14} {:>12}", "run", "E(e1)", "E(p_err)", "max|e1|");
    for r in &outcome.manifest.runs {
        println!(
            "{:<12} {:>14.6e} {:>14.6e} {:>12.4e}",
            r.name, r.ise_e1, r.ise_p_err, r.max_abs_e1
        );
    }
    if !outcome.checkpoints.is_empty() {
        println!("{:<12} {:>8} {:>14} {:>14}", "checkpoint", "t", "E(e1)", "E(p_err)");
        for c in &outcome.checkpoints {
            println!(
                "{:<12} {:>8} {:>14.6e} {:>14.6e}",
                format!("{}_{:02}", c.source, c.index),
                c.t_learn,
                c.ise_e1,
                c.ise_p_err
            );
        }
    }
    println!("done in {:.1} s", outcome.manifest.wall_clock_s);
    Ok(())
}

fn replay(snapshot: PathBuf, trajectory: &str, half_length: f64, dt: f64, out: Option<PathBuf>) -> anyhow::Result<()> {
    let snap = SnapshotFile::load(&snapshot)?;
    let spec = scenario::parse_trajectory(trajectory)?;
    let params = PendulumParams::default().with_half_length(half_length);
    params.validate()?;
    let trace = scenario::replay(&snap, spec, &PendulumPlant::new(params), dt)
        .with_context(|| format!("replaying {}", snapshot.display()))?;
    if let Some(out) = out {
        write_file(&out, &trace_to_csv(&trace))?;
    }
    print_metrics(&trace.metrics());
    Ok(())
}

fn metrics(path: PathBuf) -> anyhow::Result<()> {
    let rows = trace_from_csv(&read_file(&path)?).with_context(|| format!("reading {}", path.display()))?;
    print_metrics(&Metrics::from_rows(&rows, &[]));
    Ok(())
}

fn print_metrics(m: &Metrics) {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
    println!("ise_e1 = {}", m.ise_e1);
    println!("ise_p_err = {}", m.ise_p_err);
    println!("max_abs_e1 = {}", m.max_abs_e1);
    println!("min_p_lmin = {}", opt(m.min_p_lmin));
    println!("max_p_lmax = {}", opt(m.max_p_lmax));
}
