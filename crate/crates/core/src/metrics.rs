//! Latency samples, balancing cost ledger, summaries and report exports.
//!
//! Export formats are fixed so that reruns are byte-identical:
//!
//! * per-sample CSV: header `wake_us,dispatch_us,latency_us,cpu`, LF endings
//! * JSON summary: see [`RunReport`]
//! * plot data: `time_us latency_us` pairs, space separated

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SimTime;
use crate::sched::{CpuId, TaskId};

/// Histogram bin width in microseconds.
pub const HIST_BIN_US: u64 = 10;
/// Upper edge of the last regular bin; anything at or above lands in the
/// overflow bin.
pub const HIST_LIMIT_US: u64 = 1000;
pub const HIST_BINS: usize = (HIST_LIMIT_US / HIST_BIN_US) as usize + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LatencySample {
    pub wake_time: SimTime,
    pub dispatch_time: SimTime,
    pub cpu: CpuId,
}

impl LatencySample {
    pub fn latency_us(&self) -> u64 {
        self.dispatch_time.since(self.wake_time)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LockInterval {
    pub cpu: CpuId,
    pub start: SimTime,
    pub end: SimTime,
}

impl LockInterval {
    pub fn len_us(&self) -> u64 {
        self.end.since(self.start)
    }
}

/// One `move_tasks`-style migration: a batch moved under a single
/// double-lock window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MigrationRecord {
    pub at: SimTime,
    pub src: CpuId,
    pub dst: CpuId,
    pub tasks: Vec<TaskId>,
    pub window_us: u64,
}

/// Direct, indirect and latency costs of balancing.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CostLedger {
    /// Balance pipeline or gate evaluations.
    pub direct_checks: u64,
    /// Tasks moved under a double lock.
    pub migrations: u64,
    pub cache_penalty_total_us: u64,
    pub lock_hold_total_us: u64,
    pub nonpreemptible_intervals: Vec<LockInterval>,
}

impl CostLedger {
    pub fn record_lock(&mut self, interval: LockInterval) {
        self.lock_hold_total_us += interval.len_us();
        self.nonpreemptible_intervals.push(interval);
    }

    pub fn summed_interval_us(&self) -> u64 {
        self.nonpreemptible_intervals
            .iter()
            .map(LockInterval::len_us)
            .sum()
    }
}

/// Everything a run collects. Append-only while the simulation is running.
#[derive(Debug, Clone, Default)]
pub struct MetricsStore {
    pub samples: Vec<LatencySample>,
    pub ledger: CostLedger,
    pub migration_log: Vec<MigrationRecord>,
    /// Wakeups or creations that landed on a CPU other than the task's
    /// previous (or creating) CPU without a double-lock migration.
    pub placements: u64,
    pub tasks_started: u64,
    pub tasks_exited: u64,
    /// Highest per-CPU utilization sample observed at any tick.
    pub peak_utilization: f64,
    /// Range of every effective-usage value computed by the zone balancer.
    pub effective_usage_range: Option<(f64, f64)>,
}

impl MetricsStore {
    pub fn latencies(&self) -> Vec<u64> {
        self.samples.iter().map(LatencySample::latency_us).collect()
    }

    pub fn summary(&self) -> Summary {
        summarize(&self.latencies())
    }

    pub fn observe_utilization(&mut self, pct: f64) {
        if pct > self.peak_utilization {
            self.peak_utilization = pct;
        }
    }

    pub fn observe_effective_usage(&mut self, pct: f64) {
        self.effective_usage_range = Some(match self.effective_usage_range {
            None => (pct, pct),
            Some((lo, hi)) => (lo.min(pct), hi.max(pct)),
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: u64,
    pub mean_us: Option<f64>,
    pub min_us: Option<u64>,
    pub max_us: Option<u64>,
    pub p99_us: Option<u64>,
    pub histogram: Vec<u64>,
}

fn hist_bin(latency_us: u64) -> usize {
    if latency_us >= HIST_LIMIT_US {
        HIST_BINS - 1
    } else {
        (latency_us / HIST_BIN_US) as usize
    }
}

/// Exact summary statistics; p99 uses the nearest-rank method.
pub fn summarize(latencies: &[u64]) -> Summary {
    let mut histogram = vec![0u64; HIST_BINS];
    for &l in latencies {
        histogram[hist_bin(l)] += 1;
    }
    if latencies.is_empty() {
        return Summary {
            count: 0,
            mean_us: None,
            min_us: None,
            max_us: None,
            p99_us: None,
            histogram,
        };
    }
    let mut sorted = latencies.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let total: u128 = sorted.iter().map(|&l| u128::from(l)).sum();
    // nearest rank: ceil(0.99 * n), 1-based
    let rank = (99 * n).div_ceil(100).max(1);
    Summary {
        count: n as u64,
        mean_us: Some(total as f64 / n as f64),
        min_us: sorted.first().copied(),
        max_us: sorted.last().copied(),
        p99_us: Some(sorted[rank - 1]),
        histogram,
    }
}

/// Machine-readable summary of one run (`summary.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario_hash: String,
    pub seed: u64,
    pub policy: String,
    pub samples: u64,
    pub mean_us: Option<f64>,
    pub min_us: Option<u64>,
    pub max_us: Option<u64>,
    pub p99_us: Option<u64>,
    pub histogram: Vec<u64>,
    pub migrations: u64,
    pub direct_checks: u64,
    pub lock_hold_total_us: u64,
    pub cache_penalty_total_us: u64,
}

impl RunReport {
    pub fn new(scenario_hash: &str, seed: u64, policy: &str, metrics: &MetricsStore) -> Self {
        let s = metrics.summary();
        Self {
            scenario_hash: scenario_hash.to_string(),
            seed,
            policy: policy.to_string(),
            samples: s.count,
            mean_us: s.mean_us,
            min_us: s.min_us,
            max_us: s.max_us,
            p99_us: s.p99_us,
            histogram: s.histogram,
            migrations: metrics.ledger.migrations,
            direct_checks: metrics.ledger.direct_checks,
            lock_hold_total_us: metrics.ledger.lock_hold_total_us,
            cache_penalty_total_us: metrics.ledger.cache_penalty_total_us,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompareError {
    #[error("runs come from different scenarios ({a} vs {b})")]
    ScenarioMismatch { a: String, b: String },
    #[error("runs used different seeds ({a} vs {b})")]
    SeedMismatch { a: u64, b: u64 },
    #[error("comparison needs at least two runs, got {0}")]
    TooFewRuns(usize),
}

/// `a / b` ratios between two runs. `None` means `b` is zero while `a` is
/// not (or a mean is undefined); `0 / 0` is reported as 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRatios {
    pub a: String,
    pub b: String,
    pub mean_latency_ratio: Option<f64>,
    pub migration_ratio: Option<f64>,
    pub lock_hold_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub scenario_hash: String,
    pub seed: u64,
    pub runs: Vec<RunReport>,
    /// First run against each of the others.
    pub ratios: Vec<PairRatios>,
}

impl ComparisonReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn ratio(a: f64, b: f64) -> Option<f64> {
    if b == 0.0 {
        (a == 0.0).then_some(1.0)
    } else {
        Some(a / b)
    }
}

pub fn compare(a: &RunReport, b: &RunReport) -> Result<PairRatios, CompareError> {
    if a.scenario_hash != b.scenario_hash {
        return Err(CompareError::ScenarioMismatch {
            a: a.scenario_hash.clone(),
            b: b.scenario_hash.clone(),
        });
    }
    if a.seed != b.seed {
        return Err(CompareError::SeedMismatch {
            a: a.seed,
            b: b.seed,
        });
    }
    let mean_latency_ratio = match (a.mean_us, b.mean_us) {
        (Some(x), Some(y)) => ratio(x, y),
        _ => None,
    };
    Ok(PairRatios {
        a: a.policy.clone(),
        b: b.policy.clone(),
        mean_latency_ratio,
        migration_ratio: ratio(a.migrations as f64, b.migrations as f64),
        lock_hold_ratio: ratio(a.lock_hold_total_us as f64, b.lock_hold_total_us as f64),
    })
}

/// Side-by-side report with ratios of the first run against every other.
pub fn compare_all(runs: Vec<RunReport>) -> Result<ComparisonReport, CompareError> {
    if runs.len() < 2 {
        return Err(CompareError::TooFewRuns(runs.len()));
    }
    let ratios = runs[1..]
        .iter()
        .map(|other| compare(&runs[0], other))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ComparisonReport {
        scenario_hash: runs[0].scenario_hash.clone(),
        seed: runs[0].seed,
        runs,
        ratios,
    })
}

pub fn write_samples_csv<W: Write>(mut w: W, samples: &[LatencySample]) -> io::Result<()> {
    w.write_all(b"wake_us,dispatch_us,latency_us,cpu\n")?;
    for s in samples {
        writeln!(
            w,
            "{},{},{},{}",
            s.wake_time.as_us(),
            s.dispatch_time.as_us(),
            s.latency_us(),
            s.cpu.0
        )?;
    }
    Ok(())
}

pub fn write_plot_data<W: Write>(mut w: W, samples: &[LatencySample]) -> io::Result<()> {
    w.write_all(b"# time_us latency_us\n")?;
    for s in samples {
        writeln!(w, "{} {}", s.wake_time.as_us(), s.latency_us())?;
    }
    Ok(())
}
