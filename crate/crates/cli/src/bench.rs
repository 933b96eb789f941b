use crate::{write_out, CliError, Common, Outcome};
use clap::{Args, Subcommand};
use quicmqtt::bench::conn_overhead::{bench_conn_overhead, OverheadConfig};
use quicmqtt::bench::half_open::{bench_half_open, HalfOpenConfig};
use quicmqtt::bench::hol::{bench_hol, HolConfig};
use quicmqtt::bench::migrate::{bench_migrate, MigrateConfig};
use quicmqtt::bench::{BenchResult, Mode};
use std::path::PathBuf;
use std::time::Duration;

#[derive(Args)]
pub struct Output {
    /// Write the time series as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
pub enum Scenario {
    /// Packets exchanged while connecting, per role.
    ConnOverhead {
        /// Comma-separated subset of tcp, quic1rtt, quic0rtt.
        #[arg(long, value_delimiter = ',', default_value = "tcp,quic1rtt,quic0rtt")]
        modes: Vec<String>,
        #[arg(long, default_value_t = 10)]
        experiments: usize,
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        #[command(flatten)]
        out: Output,
    },
    /// Delivery latency under deterministic per-flow drops.
    Hol {
        #[arg(long, default_value_t = 4)]
        streams: usize,
        #[arg(long, default_value_t = 200)]
        messages: usize,
        #[arg(long, default_value_t = 10)]
        interval_ms: u64,
        #[command(flatten)]
        out: Output,
    },
    /// Broker state after every publisher dies without closing.
    HalfOpen {
        #[arg(long, default_value_t = 10)]
        publishers: usize,
        /// Connections per publisher.
        #[arg(long, default_value_t = 10)]
        conns: usize,
        #[arg(long, default_value_t = 5)]
        restart_after_s: u64,
        #[arg(long, default_value_t = 120)]
        horizon_s: u64,
        /// Enable keep-alive probing on the TCP model with this period.
        #[arg(long)]
        tcp_keep_alive_s: Option<u64>,
        #[command(flatten)]
        out: Output,
    },
    /// Subscriber address changes during a steady publish load.
    Migrate {
        #[arg(long, default_value_t = 3)]
        changes: usize,
        #[arg(long, default_value_t = 300)]
        interval_s: u64,
        #[arg(long, default_value_t = 960)]
        duration_s: u64,
        /// Messages per second.
        #[arg(long, default_value_t = 10)]
        rate: u32,
        #[command(flatten)]
        out: Output,
    },
}

pub fn run(c: &Common, s: &Scenario) -> Outcome {
    if c.trace.is_some() {
        return Err(CliError::Usage(
            "--trace applies to broker, pub and sub".into(),
        ));
    }
    let profile = c.profile()?;
    let seed = c.sim_seed();
    let (result, out) = match s {
        Scenario::ConnOverhead {
            modes,
            experiments,
            iterations,
            out,
        } => {
            let modes = modes
                .iter()
                .map(|m| {
                    Mode::by_name(m).ok_or_else(|| CliError::Usage(format!("unknown mode {m:?}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            if *experiments == 0 || *iterations == 0 {
                return Err(CliError::Usage(
                    "experiments and iterations must be positive".into(),
                ));
            }
            let cfg = OverheadConfig {
                experiments: *experiments,
                iterations: *iterations,
                ..OverheadConfig::new(profile, seed)
            };
            (bench_conn_overhead(&cfg, &modes), out)
        }
        Scenario::Hol {
            streams,
            messages,
            interval_ms,
            out,
        } => {
            if *streams < 2 {
                return Err(CliError::Usage("hol needs at least 2 streams".into()));
            }
            let cfg = HolConfig {
                streams: *streams,
                messages: *messages,
                interval: Duration::from_millis(*interval_ms),
                ..HolConfig::new(profile, seed)
            };
            (bench_hol(&[profile], &cfg), out)
        }
        Scenario::HalfOpen {
            publishers,
            conns,
            restart_after_s,
            horizon_s,
            tcp_keep_alive_s,
            out,
        } => {
            let cfg = HalfOpenConfig {
                publishers: *publishers,
                conns_per_publisher: *conns,
                restart_after: Duration::from_secs(*restart_after_s),
                horizon: Duration::from_secs(*horizon_s),
                tcp_keep_alive: tcp_keep_alive_s.map(Duration::from_secs),
                ..HalfOpenConfig::new(profile, seed)
            };
            (bench_half_open(&cfg), out)
        }
        Scenario::Migrate {
            changes,
            interval_s,
            duration_s,
            rate,
            out,
        } => {
            if *rate == 0 {
                return Err(CliError::Usage("rate must be positive".into()));
            }
            let cfg = MigrateConfig {
                changes: *changes,
                interval: Duration::from_secs(*interval_s),
                duration: Duration::from_secs(*duration_s),
                rate: *rate,
                ..MigrateConfig::new(profile, seed)
            };
            (bench_migrate(&cfg), out)
        }
    };
    report(&result);
    write_out(&c.json, &result.to_json())?;
    write_out(&out.csv, &result.series_csv())?;
    Ok(result.passed())
}

fn report(r: &BenchResult) {
    for (name, ok) in &r.checks {
        eprintln!(
            "{} {}/{}",
            if *ok { "PASS" } else { "FAIL" },
            r.scenario,
            name
        );
    }
    for (name, v) in &r.metrics {
        eprintln!("  {name} = {v}");
    }
}
