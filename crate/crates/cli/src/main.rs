//! `quicmqtt`: broker, publisher and subscriber over the simulator or real
//! UDP, plus the benchmark scenarios.

mod bench;
mod live;

use clap::{Args, Parser, Subcommand};
use quicmqtt::netsim::Profile;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "quicmqtt", version, about = "MQTT over a QUIC-style transport")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Network profile: wired, wireless or long_distance.
    #[arg(long, global = true, default_value = "wired")]
    pub profile: String,
    /// Drop the profile's random loss, keeping its delay.
    #[arg(long, global = true)]
    pub lossless: bool,
    /// Seed for the simulator and all key generation. Real-UDP runs default
    /// to a time-derived seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for session files, broker keys and persistent sessions.
    #[arg(long, global = true)]
    pub state_dir: Option<PathBuf>,
    /// Write the packet trace (CSV in simulation, one label per line on UDP).
    #[arg(long, global = true)]
    pub trace: Option<PathBuf>,
    /// Write the JSON result document here; `-` for stdout.
    #[arg(long, global = true)]
    pub json: Option<PathBuf>,
}

impl Common {
    pub fn profile(&self) -> Result<Profile, CliError> {
        let p = Profile::by_name(&self.profile)
            .ok_or_else(|| CliError::Usage(format!("unknown profile {:?}", self.profile)))?;
        Ok(if self.lossless { p.lossless() } else { p })
    }

    pub fn sim_seed(&self) -> u64 {
        self.seed.unwrap_or(1)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a broker on a real UDP socket.
    Broker(live::BrokerArgs),
    /// Publish messages on a topic.
    Pub(live::PubArgs),
    /// Subscribe to a topic and print deliveries.
    Sub(live::SubArgs),
    /// Run a benchmark scenario in the simulator.
    Bench {
        #[command(subcommand)]
        scenario: bench::Scenario,
    },
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or flag combinations; exit code 2.
    Usage(String),
    /// The run itself failed; exit code 1.
    Run(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

/// Outcome of a command that ran to completion.
pub type Outcome = Result<bool, CliError>;

pub fn write_out(path: &Option<PathBuf>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) if p.as_os_str() == "-" => {
            print!("{text}");
            Ok(())
        }
        Some(p) => {
            std::fs::write(p, text).map_err(|e| CliError::Run(format!("{}: {e}", p.display())))
        }
        None => Ok(()),
    }
}

pub fn is_loopback(a: SocketAddr) -> bool {
    a.ip().is_loopback()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Command::Broker(a) => live::broker(&cli.common, a),
        Command::Pub(a) => live::publish(&cli.common, a),
        Command::Sub(a) => live::subscribe(&cli.common, a),
        Command::Bench { scenario } => bench::run(&cli.common, scenario),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
