//! Synthetic task sets: the latency probe and the background stress mix.

use serde::{Deserialize, Serialize};

use crate::engine::{SimRng, SimTime};
use crate::sched::{Behavior, BehaviorScript, CpuId, Dist, SchedClass, TaskSpec};

/// Real-time priority of the probe thread.
pub const PROBE_PRIORITY: u8 = 99;

/// Periodic RT task pinned to one CPU. Every wakeup is one latency sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSpec {
    pub period_us: u64,
    pub pinned_cpu: usize,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            period_us: 1000,
            pinned_cpu: 0,
        }
    }
}

pub fn spawn_probe(spec: &ProbeSpec) -> TaskSpec {
    TaskSpec {
        class: SchedClass::RtFifo {
            priority: PROBE_PRIORITY,
        },
        affinity: Some(CpuId(spec.pinned_cpu)),
        behavior: Behavior::Periodic {
            period_us: spec.period_us,
            burst_us: 1,
        },
        start_at: SimTime::ZERO,
        creator_cpu: CpuId(spec.pinned_cpu),
        lifetime_us: None,
    }
}

/// Background load: CPU hogs with long bursts, I/O waiters with short bursts
/// and long sleeps, plus an optional stream of short-lived spawned tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StressSpec {
    pub n_cpu_hogs: u32,
    pub n_io_waiters: u32,
    pub hog_burst_us: Dist,
    pub hog_block_us: Dist,
    pub waiter_burst_us: Dist,
    pub waiter_block_us: Dist,
    /// Mean task creations per second.
    pub spawn_rate: Option<f64>,
    /// Lifetime of spawned tasks.
    pub lifetime_us: u64,
}

impl Default for StressSpec {
    fn default() -> Self {
        Self {
            n_cpu_hogs: 6,
            n_io_waiters: 10,
            hog_burst_us: Dist::uniform(5_000, 50_000),
            hog_block_us: Dist::uniform(5_000, 50_000),
            waiter_burst_us: Dist::uniform(200, 2_000),
            waiter_block_us: Dist::uniform(2_000, 10_000),
            spawn_rate: None,
            lifetime_us: 200_000,
        }
    }
}

impl StressSpec {
    /// No background tasks at all.
    pub fn idle() -> Self {
        Self {
            n_cpu_hogs: 0,
            n_io_waiters: 0,
            spawn_rate: None,
            ..Self::default()
        }
    }
}

/// Expands a stress spec into task specs. Creators are assigned round-robin
/// over the CPUs; spawned tasks arrive with gaps drawn uniformly from half to
/// one and a half times the mean gap.
pub fn spawn_stress(
    spec: &StressSpec,
    n_cpus: usize,
    duration_us: u64,
    rng: &mut SimRng,
) -> Vec<TaskSpec> {
    let n_cpus = n_cpus.max(1);
    let mut out = Vec::new();
    let mut next_cpu = 0usize;
    let mut creator = || {
        let c = CpuId(next_cpu % n_cpus);
        next_cpu += 1;
        c
    };
    let script = |burst: Dist, block: Dist| {
        BehaviorScript::single(burst, block)
            .expect("stress distributions validated by the scenario")
    };
    for _ in 0..spec.n_cpu_hogs {
        out.push(TaskSpec {
            class: SchedClass::Normal,
            affinity: None,
            behavior: Behavior::Script(script(spec.hog_burst_us, spec.hog_block_us)),
            start_at: SimTime::ZERO,
            creator_cpu: creator(),
            lifetime_us: None,
        });
    }
    for _ in 0..spec.n_io_waiters {
        out.push(TaskSpec {
            class: SchedClass::Normal,
            affinity: None,
            behavior: Behavior::Script(script(spec.waiter_burst_us, spec.waiter_block_us)),
            start_at: SimTime::ZERO,
            creator_cpu: creator(),
            lifetime_us: None,
        });
    }
    if let Some(rate) = spec.spawn_rate.filter(|r| *r > 0.0) {
        let mean_gap = (1_000_000.0 / rate).max(1.0);
        let lo = (mean_gap * 0.5).round().max(1.0) as u64;
        let hi = (mean_gap * 1.5).round().max(1.0) as u64;
        let mut t = rng.range_inclusive(lo, hi);
        while t < duration_us {
            out.push(TaskSpec {
                class: SchedClass::Normal,
                affinity: None,
                behavior: Behavior::Script(script(spec.waiter_burst_us, spec.waiter_block_us)),
                start_at: SimTime(t),
                creator_cpu: creator(),
                lifetime_us: Some(spec.lifetime_us),
            });
            t += rng.range_inclusive(lo, hi);
        }
    }
    out
}
