use std::error::Error;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use abv_core::modes::{dump_truth_table, truth_table_csv};
use abv_core::sim::server::{run_interactive, ServeOptions, TelemetryServer};
use abv_core::sim::sweep::sweep;
use abv_core::{load_scenario, run, Config, RunOptions, RunOutput, Scenario, Simulation};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "abv", version, about = "Low-speed automation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario headless or with the telemetry server.
    Run(RunArgs),
    /// Run a scenario at several penetration rates and seeds.
    Sweep(SweepArgs),
    /// Print the mode arbitration truth table.
    Modes {
        /// Emit the table as CSV.
        #[arg(long)]
        table: bool,
    },
    /// Check a scenario file and list every problem found.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Simulated seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Run as fast as possible without a server (the default).
    #[arg(long, conflicts_with = "serve")]
    headless: bool,
    /// Serve telemetry on this port and pace the run against the wall clock.
    #[arg(long, value_name = "PORT")]
    serve: Option<u16>,
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Comma-separated penetration rates in [0, 1].
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.25, 0.5, 0.75, 1.0])]
    penetration: Vec<f64>,
    /// Seeds per penetration rate.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

fn scenario(path: &PathBuf, seed: Option<u64>, duration: Option<f64>) -> Result<Scenario, Box<dyn Error>> {
    let mut sc = load_scenario(path)?;
    if let Some(seed) = seed {
        sc.seed = seed;
    }
    if let Some(duration) = duration {
        sc.duration = duration;
        sc.validate()?;
    }
    Ok(sc)
}

fn run_cmd(args: RunArgs) -> Result<(), Box<dyn Error>> {
    let sc = scenario(&args.scenario, args.seed, args.duration)?;
    let opts = RunOptions { trace: args.trace.is_some() };
    let out: RunOutput = match args.serve {
        Some(port) => {
            let cfg: Config = sc.config()?;
            let server = TelemetryServer::bind(port)?;
            eprintln!("serving telemetry on ws://{}/ (add ?role=driver to drive)", server.addr());
            let sim = Simulation::new(&sc, opts)?;
            let serve = ServeOptions {
                realtime_factor: cfg.sim.realtime_factor,
                snapshot_rate: cfg.sim.snapshot_rate,
            };
            let out = run_interactive(sim, &server, serve)?;
            server.shutdown();
            out
        }
        None => run(&sc, opts)?,
    };
    if let (Some(path), Some(trace)) = (&args.trace, &out.trace) {
        fs::write(path, trace)?;
    }
    let metrics = serde_json::to_string_pretty(&out.metrics)?;
    match &args.metrics {
        Some(path) => fs::write(path, metrics + "\n")?,
        None => println!("{metrics}"),
    }
    let m = &out.metrics;
    eprintln!(
        "{}: {:.1} s, {} vehicles ({} automated), {} collisions, {:.1} g/km",
        if sc.name.is_empty() { "scenario" } else { &sc.name },
        m.duration,
        m.vehicles,
        m.abv_vehicles,
        m.collisions,
        m.fuel_g_per_km
    );
    if let Some(ego) = &out.ego {
        eprintln!("ego: mode {}, s={:.2} m, d={:.2} m, v={:.2} m/s", ego.mode, ego.state.s, ego.state.d, ego.state.v);
    }
    Ok(())
}

fn sweep_cmd(args: SweepArgs) -> Result<(), Box<dyn Error>> {
    let sc = scenario(&args.scenario, None, None)?;
    let report = sweep(&sc, &args.penetration, args.seeds)?;
    match &args.out {
        Some(path) => fs::write(path, report.to_csv())?,
        None => print!("{}", report.to_csv()),
    }
    eprint!("{}", report.summary());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run_cmd(args),
        Command::Sweep(args) => sweep_cmd(args),
        Command::Modes { table } => {
            let rows = dump_truth_table(&Config::default().arbiter);
            if table {
                print!("{}", truth_table_csv(&rows));
            } else {
                eprintln!("{} cells; pass --table for the CSV", rows.len());
            }
            Ok(())
        }
        Command::Validate { scenario } => load_scenario(&scenario).map_err(Into::into).map(|sc| {
            println!("{}: ok ({} segments, {:.0} m, {} events)", scenario.display(), sc.map.segments().len(), sc.map.total_length(), sc.events.len());
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
