use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pimforge::config::{load_config, CompressConfig, MapConfig, ReportConfig, SimulateConfig, VerifyConfig};
use pimforge::pipeline::{self, Event};
use pimforge::{verify, Error, Result};

#[derive(Parser)]
#[command(name = "pimforge", version, about = "Compress small CNNs and simulate them on a bit-serial PIM layout")]
struct Cli {
    /// Job config (JSON). Defaults to $PIMFORGE_CONFIG_DIR/<command>.json.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Print one JSON event per line instead of text.
    #[arg(long, global = true)]
    log_json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train or load a dense model, then prune and quantize it with ADMM.
    Compress,
    /// Lay a quantized model out onto PEs and sub-arrays.
    Map,
    /// Run a dataset through a layout and record operation counts.
    Simulate,
    /// Estimate area, energy and throughput from a layout and its trace.
    Report {
        /// Baseline report to compare against.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Run the built-in correctness suites.
    Verify,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Compress => "compress",
            Command::Map => "map",
            Command::Simulate => "simulate",
            Command::Report { .. } => "report",
            Command::Verify => "verify",
        }
    }
}

fn config_path(cli: &Cli) -> Option<PathBuf> {
    cli.config.clone().or_else(|| {
        let dir = std::env::var_os("PIMFORGE_CONFIG_DIR")?;
        Some(Path::new(&dir).join(format!("{}.json", cli.command.name())))
    })
}

fn required(cli: &Cli) -> Result<PathBuf> {
    config_path(cli).ok_or_else(|| {
        Error::Config(format!("{} needs --config or PIMFORGE_CONFIG_DIR", cli.command.name()))
    })
}

fn run(cli: &Cli) -> Result<bool> {
    let json = cli.log_json;
    let mut sink = |e: &Event| {
        if json {
            println!("{}", serde_json::to_string(e).unwrap_or_default());
        } else {
            println!("[{}] {}", e.stage, e.message);
        }
    };
    match &cli.command {
        Command::Compress => {
            let (cfg, base) = load_config::<CompressConfig>(&required(cli)?)?;
            pipeline::run_compress(&cfg, &base, cli.seed, &mut sink)?;
        }
        Command::Map => {
            let (cfg, base) = load_config::<MapConfig>(&required(cli)?)?;
            pipeline::run_map(&cfg, &base, cli.seed, &mut sink)?;
        }
        Command::Simulate => {
            let (cfg, base) = load_config::<SimulateConfig>(&required(cli)?)?;
            pipeline::run_simulate(&cfg, &base, cli.seed, &mut sink)?;
        }
        Command::Report { compare } => {
            let (cfg, base) = load_config::<ReportConfig>(&required(cli)?)?;
            pipeline::run_report(&cfg, &base, compare.as_deref(), &mut sink)?;
        }
        Command::Verify => {
            // verify runs without a config; a missing default file is fine
            let (cfg, base) = match config_path(cli) {
                Some(p) if cli.config.is_some() || p.exists() => load_config::<VerifyConfig>(&p)?,
                _ => (VerifyConfig::default(), PathBuf::from(".")),
            };
            let report = verify::run_verify(&cfg, &base, cli.seed, &mut sink)?;
            return Ok(report.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: verification failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
