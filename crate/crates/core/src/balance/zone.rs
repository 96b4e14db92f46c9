//! Operation-zone load balancing.
//!
//! No periodic pass: balancing is only considered when a task is created, a
//! blocked task wakes, or a tick lands on the busiest CPU. Each of those
//! triggers first asks the utilization gate of the configured policy:
//!
//! | policy       | balance when utilization is over |
//! |--------------|----------------------------------|
//! | cold         | 30 %                             |
//! | warm (low)   | 30 %                             |
//! | warm (mid)   | 50 %                             |
//! | warm (high)  | 80 %                             |
//! | hot          | 80 %                             |
//!
//! The utilization is either that of the busiest CPU or, with
//! `balance_cpus_avg_enable`, the mean over all CPUs. Under a warm policy a
//! task is only migrated when its effective usage (windowed usage plus a
//! weight score, clamped to the 30..=80 band) is above the spot. Weight scores
//! drop by one step for every prize period a task stays above the spot and
//! rise by one step when an above-spot episode ends before the punish period.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{migrate, BalanceOutcome, LockCostModel};
use crate::engine::SimTime;
use crate::error::{ScenarioError, SimError};
use crate::sched::{CpuId, Machine, TaskId};
use crate::trace::{TraceRecord, TriggerKind};

pub const COLD_THRESHOLD: f64 = 30.0;
pub const HOT_THRESHOLD: f64 = 80.0;

/// Bounds of effective usage: the low and high spots.
pub const EFFECTIVE_MIN: f64 = 30.0;
pub const EFFECTIVE_MAX: f64 = 80.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Spot {
    Low,
    Mid,
    High,
}

impl Spot {
    pub fn threshold(self) -> f64 {
        match self {
            Spot::Low => 30.0,
            Spot::Mid => 50.0,
            Spot::High => 80.0,
        }
    }

    pub fn from_threshold(pct: u64) -> Option<Spot> {
        match pct {
            30 => Some(Spot::Low),
            50 => Some(Spot::Mid),
            80 => Some(Spot::High),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ZonePolicy {
    Cold,
    Warm(Spot),
    Hot,
}

impl ZonePolicy {
    pub const ALL: [ZonePolicy; 5] = [
        ZonePolicy::Cold,
        ZonePolicy::Warm(Spot::Low),
        ZonePolicy::Warm(Spot::Mid),
        ZonePolicy::Warm(Spot::High),
        ZonePolicy::Hot,
    ];

    pub fn threshold(self) -> f64 {
        match self {
            ZonePolicy::Cold => COLD_THRESHOLD,
            ZonePolicy::Warm(spot) => spot.threshold(),
            ZonePolicy::Hot => HOT_THRESHOLD,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ZonePolicy::Cold => "cold",
            ZonePolicy::Warm(Spot::Low) => "warm_low",
            ZonePolicy::Warm(Spot::Mid) => "warm_mid",
            ZonePolicy::Warm(Spot::High) => "warm_high",
            ZonePolicy::Hot => "hot",
        }
    }

    pub fn spot(self) -> Option<Spot> {
        match self {
            ZonePolicy::Warm(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for ZonePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ZonePolicy {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ZonePolicy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                ScenarioError::invalid("zone.policy", format!("unknown zone policy `{s}`"))
            })
    }
}

impl Serialize for ZonePolicy {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ZonePolicy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(|_| {
            serde::de::Error::custom(format!(
                "unknown zone policy `{s}`, expected one of cold, warm_low, warm_mid, warm_high, hot"
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Zone {
    Cold,
    Warm,
    Hot,
}

/// Band of a utilization value. 30 is still cold, 80 is still warm.
///
/// Panics on values outside `0..=100`.
pub fn zone_classify(util: f64) -> Zone {
    assert!(
        (0.0..=100.0).contains(&util),
        "utilization {util} outside 0..=100"
    );
    if util <= COLD_THRESHOLD {
        Zone::Cold
    } else if util > HOT_THRESHOLD {
        Zone::Hot
    } else {
        Zone::Warm
    }
}

/// `usage + score`, clamped to the low/high spot band.
pub fn effective_usage(usage_pct: f64, weight_score: i32) -> f64 {
    (usage_pct + f64::from(weight_score)).clamp(EFFECTIVE_MIN, EFFECTIVE_MAX)
}

/// Scenario keys under `"zone"`. The knob names follow the
/// `/proc/sys/kernel/balance_*` interface of the original balancer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZoneConfig {
    pub policy: ZonePolicy,
    #[serde(
        serialize_with = "serialize_flag",
        deserialize_with = "deserialize_flag"
    )]
    pub balance_cpus_avg_enable: bool,
    pub balance_weight_prize_time_us: u64,
    pub balance_weight_punish_time_us: u64,
    pub weight_step: i32,
}

impl Default for ZoneConfig {
    fn default() -> Self {
        Self {
            policy: ZonePolicy::Warm(Spot::High),
            balance_cpus_avg_enable: false,
            balance_weight_prize_time_us: 5_000_000,
            balance_weight_punish_time_us: 5_000_000,
            weight_step: 5,
        }
    }
}

fn serialize_flag<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_u8(u8::from(*v))
}

fn deserialize_flag<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Flag {
        Int(u64),
        Bool(bool),
    }
    match Flag::deserialize(d)? {
        Flag::Int(0) | Flag::Bool(false) => Ok(false),
        Flag::Int(1) | Flag::Bool(true) => Ok(true),
        Flag::Int(n) => Err(serde::de::Error::custom(format!(
            "expected 0 or 1, got {n}"
        ))),
    }
}

/// Per-task score bookkeeping.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WeightState {
    pub weight_score: i32,
    /// Start of the current above-spot episode.
    pub high_usage_since: Option<SimTime>,
    /// Start of the current prize period inside that episode.
    prize_window_start: Option<SimTime>,
}

/// Which adjustment an observation produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightChange {
    Prize,
    Punish,
}

impl WeightState {
    /// Feeds one usage sample taken at `now`.
    pub fn observe(
        &mut self,
        usage_pct: f64,
        spot: Spot,
        now: SimTime,
        cfg: &ZoneConfig,
    ) -> Option<WeightChange> {
        if usage_pct > spot.threshold() {
            self.high_usage_since.get_or_insert(now);
            let window = *self.prize_window_start.get_or_insert(now);
            if now.since(window) >= cfg.balance_weight_prize_time_us {
                self.weight_score = bounded_step(self.weight_score, -cfg.weight_step, usage_pct);
                self.prize_window_start = Some(now);
                return Some(WeightChange::Prize);
            }
            None
        } else {
            let since = self.high_usage_since.take()?;
            self.prize_window_start = None;
            if now.since(since) < cfg.balance_weight_punish_time_us {
                self.weight_score = bounded_step(self.weight_score, cfg.weight_step, usage_pct);
                return Some(WeightChange::Punish);
            }
            None
        }
    }
}

/// Applies `delta` without pushing `usage + score` further outside the
/// effective band than it already is.
fn bounded_step(score: i32, delta: i32, usage_pct: f64) -> i32 {
    let next = score + delta;
    if delta < 0 {
        let floor = (EFFECTIVE_MIN - usage_pct).ceil() as i32;
        next.max(floor.min(score))
    } else {
        let ceil = (EFFECTIVE_MAX - usage_pct).floor() as i32;
        next.min(ceil.max(score))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trigger {
    TaskCreated(TaskId),
    IdleWakeup(TaskId),
    TickBusiestMember(CpuId),
}

#[derive(Debug, Clone)]
pub struct ZoneBalancer {
    config: ZoneConfig,
    lock: LockCostModel,
}

impl ZoneBalancer {
    pub fn new(config: ZoneConfig, lock: LockCostModel) -> Self {
        Self { config, lock }
    }

    pub fn config(&self) -> &ZoneConfig {
        &self.config
    }

    /// Utilization the gate compares against the policy threshold.
    pub fn gate_input(&self, m: &Machine) -> f64 {
        if self.config.balance_cpus_avg_enable {
            m.avg_utilization()
        } else {
            m.busiest_cpu().map_or(0.0, |c| m.cpu_utilization(c))
        }
    }

    pub fn gate(&self, m: &Machine) -> bool {
        gate_open(self.config.policy, self.gate_input(m))
    }

    /// Handles one trigger. Every call is a direct-cost check, whether or
    /// not the gate opens.
    pub fn on_trigger(
        &mut self,
        m: &mut Machine,
        trigger: Trigger,
    ) -> Result<BalanceOutcome, SimError> {
        m.metrics_mut().ledger.direct_checks += 1;
        let open = self.gate(m);
        let kind = match trigger {
            Trigger::TaskCreated(_) => TriggerKind::TaskCreated,
            Trigger::IdleWakeup(_) => TriggerKind::IdleWakeup,
            Trigger::TickBusiestMember(_) => TriggerKind::TickBusiestMember,
        };
        let now = m.now();
        m.trace_mut().record(TraceRecord::Trigger {
            at: now,
            kind,
            gate_open: open,
        });
        match trigger {
            Trigger::TaskCreated(t) => {
                let cpu = if open {
                    m.least_loaded_cpu()
                } else {
                    m.task(t).creator_cpu
                };
                Ok(BalanceOutcome {
                    placed_on: Some(cpu),
                    ..BalanceOutcome::checked()
                })
            }
            Trigger::IdleWakeup(t) => {
                let cpu = if open {
                    m.least_loaded_cpu()
                } else {
                    m.task(t).last_cpu
                };
                Ok(BalanceOutcome {
                    placed_on: Some(cpu),
                    ..BalanceOutcome::checked()
                })
            }
            Trigger::TickBusiestMember(src) => {
                if !open {
                    return Ok(BalanceOutcome::checked());
                }
                let Some(victim) = self.select_victim(m, src) else {
                    return Ok(BalanceOutcome::checked());
                };
                let dst = m.least_loaded_cpu();
                let moved = migrate(m, src, dst, &[victim], &self.lock)?;
                Ok(BalanceOutcome::moved(moved))
            }
        }
    }

    /// Most eligible movable task on `src`. Under a warm policy only tasks
    /// whose effective usage is above the spot qualify; cold and hot leave
    /// the decision to the gate.
    pub fn select_victim(&self, m: &mut Machine, src: CpuId) -> Option<TaskId> {
        let spot = self.config.policy.spot();
        let mut best: Option<(TaskId, f64)> = None;
        for t in m.movable_tasks(src) {
            let task = m.task(t);
            let eff = effective_usage(task.usage_pct, task.weight.weight_score);
            m.metrics_mut().observe_effective_usage(eff);
            if spot.is_some_and(|s| eff <= s.threshold()) {
                continue;
            }
            if best.is_none_or(|(_, e)| eff > e) {
                best = Some((t, eff));
            }
        }
        best.map(|(t, _)| t)
    }

    /// Advances every live task's weight score by one usage sample. Only
    /// warm policies keep scores.
    pub fn update_weights(&mut self, m: &mut Machine) {
        let Some(spot) = self.config.policy.spot() else {
            return;
        };
        let now = m.now();
        let ids: Vec<TaskId> = m
            .tasks()
            .iter()
            .filter(|t| t.is_alive())
            .map(|t| t.id)
            .collect();
        for id in ids {
            let task = m.task_mut(id);
            let usage = task.usage_pct;
            task.weight.observe(usage, spot, now, &self.config);
            let eff = effective_usage(usage, task.weight.weight_score);
            m.metrics_mut().observe_effective_usage(eff);
        }
    }
}

/// Strict `utilization > threshold(policy)`.
pub fn gate_open(policy: ZonePolicy, utilization: f64) -> bool {
    utilization > policy.threshold()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::SimRng;
    use crate::sched::{Behavior, BehaviorScript, Dist, MachineConfig, SchedClass, TaskSpec};

    fn quad_core_example(policy: ZonePolicy, avg: bool) -> (Machine, ZoneBalancer, Vec<TaskId>) {
        let mut m = Machine::new(MachineConfig::default(), SimRng::new(5));
        let mut queued = Vec::new();
        for cpu in 0..4 {
            for k in 0..2 {
                let id = m
                    .add_task(TaskSpec {
                        class: SchedClass::Normal,
                        affinity: None,
                        behavior: Behavior::Script(
                            BehaviorScript::single(Dist::Constant(90_000), Dist::Constant(10_000))
                                .unwrap(),
                        ),
                        start_at: SimTime::ZERO,
                        creator_cpu: CpuId(cpu),
                        lifetime_us: None,
                    })
                    .unwrap();
                m.start_task(id, CpuId(cpu)).unwrap();
                if k == 1 {
                    queued.push(id);
                }
            }
        }
        for (c, pct) in [50.0, 85.0, 25.0, 55.0].into_iter().enumerate() {
            m.seed_utilization(CpuId(c), pct);
        }
        for &t in &queued {
            m.seed_task_usage(t, 60.0);
        }
        let cfg = ZoneConfig {
            policy,
            balance_cpus_avg_enable: avg,
            ..ZoneConfig::default()
        };
        (m, ZoneBalancer::new(cfg, LockCostModel::default()), queued)
    }

    #[test]
    fn classify_quoted_bands() {
        assert_eq!(zone_classify(25.0), Zone::Cold);
        assert_eq!(zone_classify(85.0), Zone::Hot);
        assert_eq!(zone_classify(55.0), Zone::Warm);
        assert_eq!(zone_classify(30.0), Zone::Cold);
        assert_eq!(zone_classify(80.0), Zone::Warm);
        assert_eq!(zone_classify(0.0), Zone::Cold);
        assert_eq!(zone_classify(100.0), Zone::Hot);
    }

    #[test]
    #[should_panic(expected = "outside 0..=100")]
    fn classify_rejects_out_of_range() {
        zone_classify(100.5);
    }

    #[test]
    fn gate_examples() {
        assert!(gate_open(ZonePolicy::Warm(Spot::Mid), 53.75));
        assert!(!gate_open(ZonePolicy::Cold, 20.0));
        assert!(!gate_open(ZonePolicy::Hot, 79.0));
        assert!(gate_open(ZonePolicy::Warm(Spot::High), 81.0));
        assert!(!gate_open(ZonePolicy::Warm(Spot::High), 80.0));
    }

    #[test]
    fn averaged_gate_input_of_quad_core_example() {
        let (m, z, _) = quad_core_example(ZonePolicy::Warm(Spot::Mid), true);
        assert_eq!(z.gate_input(&m), 53.75);
        assert!(z.gate(&m));
        let (m, z, _) = quad_core_example(ZonePolicy::Warm(Spot::Mid), false);
        assert_eq!(z.gate_input(&m), 85.0);
    }

    #[test]
    fn quad_core_example_moves_one_task_from_busiest_to_idlest() {
        let (mut m, mut z, queued) = quad_core_example(ZonePolicy::Warm(Spot::Mid), true);
        let out = z
            .on_trigger(&mut m, Trigger::TickBusiestMember(CpuId(1)))
            .unwrap();
        assert_eq!(out.migrated, 1);
        let rec = &m.metrics().migration_log[0];
        assert_eq!((rec.src, rec.dst), (CpuId(1), CpuId(2)));
        assert_eq!(rec.tasks, vec![queued[1]]);
        assert_eq!(m.metrics().ledger.migrations, 1);
    }

    #[test]
    fn cold_policy_below_threshold_never_moves() {
        let mut m = Machine::new(MachineConfig::default(), SimRng::new(5));
        for c in 0..4 {
            m.seed_utilization(CpuId(c), 20.0);
        }
        let mut z = ZoneBalancer::new(
            ZoneConfig {
                policy: ZonePolicy::Cold,
                ..ZoneConfig::default()
            },
            LockCostModel::default(),
        );
        let out = z
            .on_trigger(&mut m, Trigger::TickBusiestMember(CpuId(0)))
            .unwrap();
        assert!(out.checked_only);
        assert_eq!(m.metrics().ledger.direct_checks, 1);
        assert_eq!(m.metrics().ledger.migrations, 0);
    }

    #[test]
    fn closed_gate_keeps_new_task_on_creator() {
        let mut m = Machine::new(MachineConfig::default(), SimRng::new(5));
        let t = m
            .add_task(TaskSpec {
                class: SchedClass::Normal,
                affinity: None,
                behavior: Behavior::Script(
                    BehaviorScript::single(Dist::Constant(10), Dist::Constant(10)).unwrap(),
                ),
                start_at: SimTime::ZERO,
                creator_cpu: CpuId(3),
                lifetime_us: None,
            })
            .unwrap();
        let mut z = ZoneBalancer::new(ZoneConfig::default(), LockCostModel::default());
        let out = z.on_trigger(&mut m, Trigger::TaskCreated(t)).unwrap();
        assert_eq!(out.placed_on, Some(CpuId(3)));
    }

    #[test]
    fn open_gate_places_wakeup_on_least_loaded() {
        let (mut m, mut z, queued) = quad_core_example(ZonePolicy::Warm(Spot::Mid), true);
        let out = z
            .on_trigger(&mut m, Trigger::IdleWakeup(queued[0]))
            .unwrap();
        assert_eq!(out.placed_on, Some(CpuId(2)));
    }

    #[test]
    fn high_spot_clamp_makes_heavy_task_ineligible() {
        assert_eq!(effective_usage(85.0, 0), 80.0);
        let (mut m, z, queued) = quad_core_example(ZonePolicy::Warm(Spot::High), false);
        m.seed_task_usage(queued[1], 85.0);
        assert_eq!(z.select_victim(&mut m, CpuId(1)), None);
    }

    #[test]
    fn mid_spot_bonus_makes_task_eligible() {
        assert_eq!(effective_usage(60.0, 5), 65.0);
        let (mut m, z, queued) = quad_core_example(ZonePolicy::Warm(Spot::Mid), false);
        m.task_mut(queued[1]).weight.weight_score = 5;
        assert_eq!(z.select_victim(&mut m, CpuId(1)), Some(queued[1]));
    }

    #[test]
    fn pinned_only_source_has_no_victim() {
        let mut m = Machine::new(MachineConfig::default(), SimRng::new(5));
        for _ in 0..2 {
            let id = m
                .add_task(TaskSpec {
                    class: SchedClass::Normal,
                    affinity: Some(CpuId(0)),
                    behavior: Behavior::Script(
                        BehaviorScript::single(Dist::Constant(10_000), Dist::Constant(10)).unwrap(),
                    ),
                    start_at: SimTime::ZERO,
                    creator_cpu: CpuId(0),
                    lifetime_us: None,
                })
                .unwrap();
            m.start_task(id, CpuId(0)).unwrap();
        }
        let z = ZoneBalancer::new(
            ZoneConfig {
                policy: ZonePolicy::Hot,
                ..ZoneConfig::default()
            },
            LockCostModel::default(),
        );
        assert_eq!(z.select_victim(&mut m, CpuId(0)), None);
    }

    #[test]
    fn effective_usage_examples() {
        assert_eq!(effective_usage(90.0, 0), 80.0);
        assert_eq!(effective_usage(10.0, 0), 30.0);
        assert_eq!(effective_usage(50.0, -5), 45.0);
    }

    /// Feeds one sample per millisecond tick: `above_us` of usage above the
    /// spot followed by low usage until `total_us`.
    fn run_episode(above_us: u64, total_us: u64) -> (i32, Vec<WeightChange>) {
        let cfg = ZoneConfig::default();
        let mut w = WeightState::default();
        let mut changes = Vec::new();
        let mut t = 0;
        while t <= total_us {
            let usage = if t < above_us { 70.0 } else { 10.0 };
            if let Some(c) = w.observe(usage, Spot::Mid, SimTime(t), &cfg) {
                changes.push(c);
            }
            t += 1000;
        }
        (w.weight_score, changes)
    }

    #[test]
    fn five_seconds_above_spot_earns_prize() {
        // above on every tick in [0, 5s], i.e. held for exactly 5 s
        let (score, changes) = run_episode(5_000_001, 8_000_000);
        assert_eq!(score, -5);
        assert_eq!(changes, vec![WeightChange::Prize]);
    }

    #[test]
    fn two_second_episode_is_punished() {
        let (score, changes) = run_episode(2_000_000, 8_000_000);
        assert_eq!(score, 5);
        assert_eq!(changes, vec![WeightChange::Punish]);
    }

    #[test]
    fn never_above_spot_keeps_zero() {
        let (score, changes) = run_episode(0, 8_000_000);
        assert_eq!(score, 0);
        assert!(changes.is_empty());
    }

    #[test]
    fn prize_repeats_every_window() {
        let (score, changes) = run_episode(15_000_001, 16_000_000);
        assert_eq!(score, -15);
        assert_eq!(changes.len(), 3);
    }

    #[test]
    fn bounded_step_respects_band() {
        // already at the floor for usage 35: 35 - 5 = 30, next step blocked
        assert_eq!(bounded_step(-5, -5, 35.0), -5);
        assert_eq!(bounded_step(0, 5, 78.0), 2);
        assert_eq!(bounded_step(0, -5, 70.0), -5);
    }

    #[test]
    fn policy_names_round_trip() {
        for p in ZonePolicy::ALL {
            assert_eq!(p.name().parse::<ZonePolicy>().unwrap(), p);
        }
        assert!("warm".parse::<ZonePolicy>().is_err());
    }
}
