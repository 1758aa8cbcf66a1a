use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use resobs::csdecode::{l1_decode, rip_constant_bruteforce};
use resobs::harness::{run_scenario, write_outputs, ScenarioConfig};
use resobs::io::{read_matrix_csv, read_measurements_csv};
use resobs::model::{build_horizon_operators, DiscreteLinearSystem};
use resobs::observer::SolverSettings;

#[derive(Parser)]
#[command(name = "resobs", version, about = "Resilient state estimation under sparse sensor attacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write trace.csv, metrics.csv and manifest.json.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// l1-decode a measurement window against a discrete system.
    Decode {
        #[arg(long)]
        system: PathBuf,
        #[arg(long)]
        measurements: PathBuf,
    },
    /// Brute-force restricted isometry constant of a matrix.
    Rip {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        sparsity: usize,
    },
    /// Run every scenario in a directory in parallel.
    Bench {
        #[arg(long)]
        configs: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Write each scenario's files into `<out>/<name>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<resobs::Error>() {
        Some(e) if !e.is_validation() => 2,
        _ => 1,
    }
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn simulate(config: &Path, out: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = ScenarioConfig::load(config)?;
    let dir = out
        .or_else(|| cfg.output_dir.clone())
        .context("no output directory: pass --out or set output_dir")?;
    let start = Instant::now();
    let run = run_scenario(&cfg)?;
    write_outputs(&run, &dir)?;
    println!(
        "{}: {} samples in {:.2}s -> {}",
        cfg.name,
        run.trace.len(),
        start.elapsed().as_secs_f64(),
        dir.display()
    );
    print_metrics(&run.metrics);
    Ok(())
}

fn print_metrics(m: &resobs::harness::MetricsTable) {
    for (o, name) in m.observers.iter().enumerate() {
        let rms: Vec<String> = m.rms.iter().map(|r| format!("{:.3e}", r[o])).collect();
        println!("  {name:<4} rms {}", rms.join(" "));
    }
}

fn decode(system: &Path, measurements: &Path) -> anyhow::Result<()> {
    let sys = DiscreteLinearSystem::from_json(&read(system)?)?;
    let meas = read_measurements_csv(&read(measurements)?, sys.m(), sys.l())?;
    let ops = build_horizon_operators(&sys, meas.window)?;
    let result = l1_decode(&meas.y_stack, &ops, &meas.u_stack, &SolverSettings::default())?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn rip(matrix: &Path, sparsity: usize) -> anyhow::Result<()> {
    let f = read_matrix_csv(&read(matrix)?)?;
    let delta = rip_constant_bruteforce(&f, sparsity)?;
    println!("{delta}");
    Ok(())
}

fn bench(configs: &Path, jobs: usize, out: Option<PathBuf>) -> anyhow::Result<()> {
    let mut paths: Vec<PathBuf> = fs::read_dir(configs)
        .with_context(|| format!("listing {}", configs.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    anyhow::ensure!(!paths.is_empty(), "no .json configs in {}", configs.display());
    let loaded: Vec<ScenarioConfig> = paths
        .iter()
        .map(|p| ScenarioConfig::load(p).with_context(|| format!("loading {}", p.display())))
        .collect::<anyhow::Result<_>>()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let results: Vec<(String, anyhow::Result<(f64, resobs::harness::ScenarioRun)>)> = pool.install(|| {
        loaded
            .par_iter()
            .map(|cfg| {
                let start = Instant::now();
                let res = run_scenario(cfg)
                    .map(|r| (start.elapsed().as_secs_f64(), r))
                    .map_err(anyhow::Error::from);
                (cfg.name.clone(), res)
            })
            .collect()
    });
    let mut first_err = None;
    for (name, res) in results {
        match res {
            Ok((secs, run)) => {
                println!("{name}: {:.2}s", secs);
                print_metrics(&run.metrics);
                if let Some(dir) = &out {
                    write_outputs(&run, &dir.join(&name))?;
                }
            }
            Err(e) => {
                eprintln!("{name}: {e:#}");
                first_err.get_or_insert(e);
            }
        }
    }
    first_err.map_or(Ok(()), Err)
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, out } => simulate(&config, out),
        Command::Decode { system, measurements } => decode(&system, &measurements),
        Command::Rip { matrix, sparsity } => rip(&matrix, sparsity),
        Command::Bench { configs, jobs, out } => bench(&configs, jobs, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
