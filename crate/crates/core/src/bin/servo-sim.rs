use std::net::ToSocketAddrs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use clap::{Parser, Subcommand};
use log::{error, info};

use servo_core::bench;
use servo_core::server::net::Frontend;
use servo_core::server::{ClockMode, Server, ServerConfig};
use servo_core::settings;
use servo_core::workload::{run_remote, run_scenario, Scenario};

/// Game server with serverless construct simulation and terrain generation.
///
/// Any configuration key can be overridden with an environment variable:
/// `SERVO_OFFLOAD__TICK_LEAD=10` sets `offload.tick_lead`.
#[derive(Parser)]
#[command(name = "servo-sim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the server on the real clock and accept TCP clients.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Stop after this many seconds.
        #[arg(long)]
        duration_s: Option<f64>,
    },
    /// Connect the scenario's bots to a running server.
    Bots {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        target: String,
    },
    /// Run a scenario in-process and write its metrics.
    Bench {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        repeat: Option<u32>,
    },
    /// Summarize metrics written by `bench`.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

fn serve(config: Option<&Path>, duration_s: Option<f64>) -> Result<()> {
    let mut config: ServerConfig = settings::load(config)?;
    config.clock = ClockMode::RealTime;
    let frontend = Frontend::listen(config.listen.as_str())?;
    info!("listening on {}", frontend.addr);
    let mut server = Server::new(config)?;
    let stop = Arc::new(AtomicBool::new(false));
    if let Some(d) = duration_s {
        let flag = stop.clone();
        thread::spawn(move || {
            thread::sleep(Duration::from_secs_f64(d));
            flag.store(true, std::sync::atomic::Ordering::Relaxed);
        });
    }
    server.serve(&frontend, &stop);
    info!("stopped after {} ticks", server.samples().len());
    Ok(())
}

fn bots(config: &Path, target: &str) -> Result<()> {
    let scenario = Scenario::load(config)?;
    let addr = target.to_socket_addrs()?.next().ok_or("target resolves to no address")?;
    let s = run_remote(&scenario, addr)?;
    println!("joined {}, refused {}, failed {}, actions {}", s.joined, s.refused, s.failed, s.actions);
    if s.failed > 0 {
        return Err(format!("{} bots failed", s.failed).into());
    }
    Ok(())
}

fn bench(path: &Path, out: &Path, seed: Option<u64>, repeat: Option<u32>) -> Result<()> {
    let mut scenario = Scenario::load(path)?;
    if let Some(s) = seed {
        scenario.seed = s;
    }
    let reps = repeat.unwrap_or(scenario.repetitions).max(1);
    for rep in 0..reps {
        let dir = out.join(format!("rep-{rep:02}"));
        info!("{} repetition {rep} -> {}", scenario.name, dir.display());
        let run = run_scenario(&scenario, rep)?;
        bench::emit(&run.log, &dir, &scenario.manifest(rep))?;
        print!("{}", bench::report(&dir)?);
    }
    Ok(())
}

fn report(input: &Path) -> Result<()> {
    if input.join(bench::MANIFEST_FILE).exists() {
        print!("{}", bench::report(input)?);
        return Ok(());
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(bench::MANIFEST_FILE).exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(format!("no runs under {}", input.display()).into());
    }
    for d in dirs {
        print!("{}", bench::report(&d)?);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let r = match &cli.command {
        Command::Serve { config, duration_s } => serve(config.as_deref(), *duration_s),
        Command::Bots { config, target } => bots(config, target),
        Command::Bench { scenario, out, seed, repeat } => bench(scenario, out, *seed, *repeat),
        Command::Report { input } => report(input),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
