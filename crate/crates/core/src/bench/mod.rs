//! The four benchmark scenarios over the simulator, and the batch runner
//! that spreads independent runs across threads.

pub mod conn_overhead;
pub mod half_open;
pub mod hol;
pub mod migrate;
pub mod runner;
pub mod world;

pub use runner::run_batch;

use serde::Serialize;
use std::collections::BTreeMap;

/// Connection setup flavour being measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Tcp,
    Quic1Rtt,
    Quic0Rtt,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Tcp, Mode::Quic1Rtt, Mode::Quic0Rtt];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Tcp => "tcp",
            Mode::Quic1Rtt => "quic1rtt",
            Mode::Quic0Rtt => "quic0rtt",
        }
    }

    pub fn by_name(s: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Percentiles {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

impl Percentiles {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Percentiles::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let at = |q: f64| v[((v.len() - 1) as f64 * q).round() as usize];
        Percentiles {
            count: v.len(),
            mean: mean(&v),
            p50: at(0.5),
            p90: at(0.9),
            p99: at(0.99),
            max: v[v.len() - 1],
        }
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Median, averaging the middle pair for even lengths.
pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Percentage reduction of `new` relative to `base`.
pub fn reduction_pct(base: f64, new: f64) -> f64 {
    if base == 0.0 {
        0.0
    } else {
        (1.0 - new / base) * 100.0
    }
}

/// Output of one scenario. Maps are ordered so the JSON is byte-stable.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BenchResult {
    pub scenario: String,
    pub seed: u64,
    pub config: BTreeMap<String, serde_json::Value>,
    /// Keyed `<profile>/<mode>/<role>`.
    pub packet_counts: BTreeMap<String, f64>,
    /// Simulated microseconds.
    pub latency_us: BTreeMap<String, Percentiles>,
    /// (seconds, count) samples.
    pub state_count: BTreeMap<String, Vec<(f64, usize)>>,
    /// (seconds, messages delivered in that second).
    pub throughput: BTreeMap<String, Vec<(f64, usize)>>,
    pub metrics: BTreeMap<String, f64>,
    pub checks: BTreeMap<String, bool>,
}

impl BenchResult {
    pub fn new(scenario: &str, seed: u64) -> Self {
        BenchResult {
            scenario: scenario.to_string(),
            seed,
            ..BenchResult::default()
        }
    }

    pub fn set_config(&mut self, key: &str, v: impl Serialize) {
        self.config.insert(
            key.to_string(),
            serde_json::to_value(v).expect("plain config values"),
        );
    }

    pub fn passed(&self) -> bool {
        self.checks.values().all(|&c| c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }

    /// Every series as `series,t_s,value` rows.
    pub fn series_csv(&self) -> String {
        let mut out = String::from("series,t_s,value\n");
        for (prefix, map) in [
            ("state", &self.state_count),
            ("throughput", &self.throughput),
        ] {
            for (name, s) in map {
                for (t, v) in s {
                    out.push_str(&format!("{prefix}:{name},{t},{v}\n"));
                }
            }
        }
        out
    }
}
