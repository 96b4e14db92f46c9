//! Scenario files: every knob of a run in one JSON document.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::balance::{
    Balancer, BaselineBalancer, BaselineConfig, ZoneBalancer, ZoneConfig, ZonePolicy,
};
use crate::engine::{SimRng, SimTime, Simulator};
use crate::error::{ScenarioError, SimError};
use crate::metrics::{MetricsStore, RunReport};
use crate::sched::{Dist, MachineConfig};
use crate::workload::{spawn_probe, spawn_stress, ProbeSpec, StressSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BalancerKind {
    #[default]
    Baseline,
    Zone,
}

/// A balancer as named on the command line: `baseline` or `zone:<policy>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    Baseline,
    Zone(ZonePolicy),
}

impl Policy {
    /// Name written into reports: `baseline` or the bare zone policy.
    pub fn report_name(self) -> &'static str {
        match self {
            Policy::Baseline => "baseline",
            Policy::Zone(z) => z.name(),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Baseline => f.write_str("baseline"),
            Policy::Zone(z) => write!(f, "zone:{}", z.name()),
        }
    }
}

impl FromStr for Policy {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "baseline" {
            return Ok(Policy::Baseline);
        }
        s.strip_prefix("zone:")
            .and_then(|z| z.parse().ok())
            .map(Policy::Zone)
            .ok_or_else(|| ScenarioError::UnknownPolicy(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Workload {
    /// `null` runs without a probe.
    pub probe: Option<ProbeSpec>,
    pub stress: StressSpec,
}

impl Default for Workload {
    fn default() -> Self {
        Self {
            probe: Some(ProbeSpec::default()),
            stress: StressSpec::default(),
        }
    }
}

/// A complete run description. The default value is the desk scenario:
/// four CPUs, sixty seconds, heavy bursty stress, 1 ms probe on CPU0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub n_cpus: usize,
    pub duration_us: u64,
    pub seed: u64,
    pub tick_us: u64,
    pub util_window_us: u64,
    pub cache_penalty_us: u64,
    pub normal_timeslice_us: u64,
    pub balancer: BalancerKind,
    pub baseline: BaselineConfig,
    pub zone: ZoneConfig,
    pub workload: Workload,
}

impl Default for Scenario {
    fn default() -> Self {
        let m = MachineConfig::default();
        Self {
            n_cpus: m.n_cpus,
            duration_us: 60_000_000,
            seed: 42,
            tick_us: m.tick_us,
            util_window_us: m.util_window_us,
            cache_penalty_us: m.cache_penalty_us,
            normal_timeslice_us: m.normal_timeslice_us,
            balancer: BalancerKind::Baseline,
            baseline: BaselineConfig::default(),
            zone: ZoneConfig::default(),
            workload: Workload::default(),
        }
    }
}

impl Scenario {
    pub fn from_json_str(text: &str) -> Result<Self, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let scenario: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let inner = e.into_inner();
            ScenarioError::Parse {
                key,
                line: inner.line(),
                column: inner.column(),
                msg: inner.to_string(),
            }
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scenario serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        use ScenarioError as E;
        if self.n_cpus < 1 {
            return Err(E::invalid("n_cpus", "must be at least 1"));
        }
        if self.tick_us < 1 {
            return Err(E::invalid("tick_us", "must be at least 1"));
        }
        if self.duration_us < self.tick_us {
            return Err(E::invalid("duration_us", "must be at least tick_us"));
        }
        if self.util_window_us < self.tick_us {
            return Err(E::invalid("util_window_us", "must be at least tick_us"));
        }
        if self.normal_timeslice_us < 1 {
            return Err(E::invalid("normal_timeslice_us", "must be at least 1"));
        }
        if self.baseline.balance_interval_idle_us < 1 || self.baseline.balance_interval_busy_us < 1
        {
            return Err(E::invalid(
                "baseline.balance_interval_idle_us",
                "balance intervals must be at least 1",
            ));
        }
        if self.zone.weight_step < 0 {
            return Err(E::invalid("zone.weight_step", "must not be negative"));
        }
        if let Some(p) = &self.workload.probe {
            if p.period_us < 2 {
                return Err(E::invalid("workload.probe.period_us", "must be at least 2"));
            }
            if p.pinned_cpu >= self.n_cpus {
                return Err(E::invalid(
                    "workload.probe.pinned_cpu",
                    format!(
                        "cpu {} does not exist on {} cpus",
                        p.pinned_cpu, self.n_cpus
                    ),
                ));
            }
        }
        let s = &self.workload.stress;
        for (key, burst, block) in [
            (
                "workload.stress.hog_burst_us",
                s.hog_burst_us,
                s.hog_block_us,
            ),
            (
                "workload.stress.waiter_burst_us",
                s.waiter_burst_us,
                s.waiter_block_us,
            ),
        ] {
            check_dist(key, burst)?;
            check_dist(&key.replace("burst", "block"), block)?;
            if burst.min() + block.min() == 0 {
                return Err(E::invalid(key, "burst and block may not both be zero"));
            }
        }
        if let Some(r) = s.spawn_rate {
            if !r.is_finite() || r < 0.0 {
                return Err(E::invalid(
                    "workload.stress.spawn_rate",
                    "must be a finite rate >= 0",
                ));
            }
        }
        Ok(())
    }

    pub fn policy(&self) -> Policy {
        match self.balancer {
            BalancerKind::Baseline => Policy::Baseline,
            BalancerKind::Zone => Policy::Zone(self.zone.policy),
        }
    }

    pub fn apply_policy(&mut self, policy: Policy) {
        match policy {
            Policy::Baseline => self.balancer = BalancerKind::Baseline,
            Policy::Zone(z) => {
                self.balancer = BalancerKind::Zone;
                self.zone.policy = z;
            }
        }
    }

    /// SHA-256 of the canonical scenario with the seed and the balancer
    /// choice blanked, so runs of different policies on one scenario share a
    /// hash.
    pub fn hash(&self) -> String {
        let mut norm = self.clone();
        norm.seed = 0;
        norm.balancer = BalancerKind::Baseline;
        norm.zone.policy = ZoneConfig::default().policy;
        let bytes = serde_json::to_vec(&norm).expect("scenario serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn machine_config(&self) -> MachineConfig {
        MachineConfig {
            n_cpus: self.n_cpus,
            tick_us: self.tick_us,
            util_window_us: self.util_window_us,
            cache_penalty_us: self.cache_penalty_us,
            normal_timeslice_us: self.normal_timeslice_us,
        }
    }

    pub fn balancer(&self) -> Balancer {
        match self.balancer {
            BalancerKind::Baseline => Balancer::Baseline(BaselineBalancer::new(self.baseline)),
            BalancerKind::Zone => {
                Balancer::Zone(ZoneBalancer::new(self.zone, self.baseline.lock()))
            }
        }
    }

    /// A simulator with the probe (task 0, when present) and the stress mix
    /// registered. The workload draws from its own RNG stream so the task
    /// set does not depend on the balancer.
    pub fn build(&self) -> Result<Simulator, SimError> {
        let mut sim = Simulator::new(self.machine_config(), self.balancer(), self.seed);
        if let Some(p) = &self.workload.probe {
            sim.add_task(spawn_probe(p))?;
        }
        let mut rng = SimRng::with_stream(self.seed, SimRng::WORKLOAD_STREAM);
        for t in spawn_stress(
            &self.workload.stress,
            self.n_cpus,
            self.duration_us,
            &mut rng,
        ) {
            sim.add_task(t)?;
        }
        Ok(sim)
    }

    pub fn run(&self) -> Result<MetricsStore, SimError> {
        self.build()?.run_until(SimTime(self.duration_us))
    }

    pub fn report(&self, metrics: &MetricsStore) -> RunReport {
        RunReport::new(
            &self.hash(),
            self.seed,
            self.policy().report_name(),
            metrics,
        )
    }

    /// A light mix that keeps every CPU well under 30 % utilization.
    pub fn light() -> Self {
        Self {
            duration_us: 5_000_000,
            workload: Workload {
                probe: Some(ProbeSpec::default()),
                stress: StressSpec {
                    n_cpu_hogs: 0,
                    n_io_waiters: 4,
                    waiter_burst_us: Dist::uniform(200, 1_000),
                    waiter_block_us: Dist::uniform(5_000, 15_000),
                    ..StressSpec::default()
                },
            },
            ..Self::default()
        }
    }
}

fn check_dist(key: &str, d: Dist) -> Result<(), ScenarioError> {
    if d.min() > d.max() {
        return Err(ScenarioError::invalid(key, "uniform range has min > max"));
    }
    Ok(())
}
