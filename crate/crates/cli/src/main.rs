use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Error;
use clap::{Parser, Subcommand};
use servesim_core::config::{ConfigError, RunConfig, RunError};
use servesim_core::metrics::{Analysis, SloVariant};
use servesim_core::scenario::{scenario, Preset, SCENARIOS};
use servesim_core::sweep::{run_sweep, PointOutcome, SweepSpec};

const EXIT_CONFIG: u8 = 3;
const EXIT_IO: u8 = 4;
const EXIT_PARTIAL: u8 = 5;

/// Discrete-event simulator for LLM inference serving.
#[derive(Debug, Parser)]
#[command(name = "servesim", version)]
struct Cli {
    /// Output directory (default: config `output.dir`, then $SERVESIM_OUT, then ./servesim-out)
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override the run seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a single configuration
    Run { config: PathBuf },
    /// Run every point of a sweep file
    Sweep {
        spec: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Run a named preset study
    Scenario {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(SCENARIOS))]
        name: String,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Print the preset config as TOML instead of running it
        #[arg(long)]
        print: bool,
    },
}

/// Failure with its exit code.
struct Fail(u8, Error);

impl From<ConfigError> for Fail {
    fn from(e: ConfigError) -> Self {
        let code = match e {
            ConfigError::Io { .. } => EXIT_IO,
            _ => EXIT_CONFIG,
        };
        Fail(code, e.into())
    }
}

impl From<RunError> for Fail {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(c) => c.into(),
            e @ RunError::Io { .. } => Fail(EXIT_IO, e.into()),
        }
    }
}

fn default_out(configured: Option<&Path>, leaf: Option<&str>) -> PathBuf {
    if let Some(d) = configured {
        return d.to_path_buf();
    }
    let root = std::env::var_os("SERVESIM_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("servesim-out"));
    match leaf {
        Some(l) => root.join(l),
        None => root,
    }
}

fn print_summary(a: &Analysis, dir: &Path) {
    let s = &a.summary;
    println!(
        "finished {}/{} requests, sim end {:.3} s, throughput {:.3} req/s, goodput {:.3} req/s",
        s.requests.finished,
        s.requests.generated,
        s.sim_end_s.0 as f64 / 1e9,
        s.throughput_rps.0,
        a.goodput(SloVariant::Both),
    );
    println!(
        "normalized latency p50 {:.6} s p99 {:.6} s, preemptions {}",
        s.normalized_latency_s.p50.0 as f64 / 1e9,
        s.normalized_latency_s.p99.0 as f64 / 1e9,
        s.preemptions
    );
    println!("wrote {}", dir.display());
}

fn report_sweep(outcomes: &[PointOutcome], dir: &Path) -> Result<(), Fail> {
    let failed: Vec<&PointOutcome> = outcomes.iter().filter(|o| o.result.is_err()).collect();
    for o in outcomes {
        match &o.result {
            Ok(a) => println!(
                "point {:>4}: throughput {:.3} req/s, goodput {:.3} req/s",
                o.index,
                a.summary.throughput_rps.0,
                a.goodput(SloVariant::Both)
            ),
            Err(e) => println!("point {:>4}: error: {e}", o.index),
        }
    }
    println!("wrote {}", dir.join("index.csv").display());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Fail(
            EXIT_PARTIAL,
            anyhow::anyhow!("{} of {} points failed", failed.len(), outcomes.len()),
        ))
    }
}

fn run_config(mut cfg: RunConfig, seed: Option<u64>, out: PathBuf) -> Result<(), Fail> {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (_, a) = cfg.run(Some(&out))?;
    print_summary(&a, &out);
    Ok(())
}

fn run_spec(
    mut spec: SweepSpec,
    seed: Option<u64>,
    parallel: usize,
    out: PathBuf,
) -> Result<(), Fail> {
    if let Some(s) = seed {
        spec.base.seed = s;
    }
    let outcomes = run_sweep(&spec, parallel, Some(&out))?;
    report_sweep(&outcomes, &out)
}

fn dispatch(cli: Cli) -> Result<(), Fail> {
    match cli.command {
        Command::Run { config } => {
            let cfg = RunConfig::load(&config)?;
            let out = cli
                .out
                .unwrap_or_else(|| default_out(cfg.output.dir.as_deref(), None));
            run_config(cfg, cli.seed, out)
        }
        Command::Sweep { spec, parallel } => {
            let spec = SweepSpec::load(&spec)?;
            let out = cli
                .out
                .unwrap_or_else(|| default_out(spec.base.output.dir.as_deref(), None));
            run_spec(spec, cli.seed, parallel, out)
        }
        Command::Scenario {
            name,
            parallel,
            print,
        } => {
            let sc = scenario(&name).map_err(|e| Fail(EXIT_CONFIG, e.into()))?;
            if print {
                print_preset(&sc.preset);
                return Ok(());
            }
            let out = cli.out.unwrap_or_else(|| default_out(None, Some(sc.name)));
            eprintln!("{}: {}", sc.name, sc.description);
            match sc.preset {
                Preset::Run(cfg) => run_config(cfg, cli.seed, out),
                Preset::Sweep(spec) => run_spec(spec, cli.seed, parallel, out),
            }
        }
    }
}

fn print_preset(p: &Preset) {
    match p {
        Preset::Run(c) => print!("{}", c.to_toml()),
        Preset::Sweep(s) => print!("{}", toml::to_string(s).expect("sweep serializes")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
