//! Load balancers and the migration mechanics they share.

pub mod baseline;
pub mod zone;

use serde::Serialize;

use crate::error::SimError;
use crate::metrics::MigrationRecord;
use crate::sched::{CpuId, Machine, TaskId};
use crate::trace::TraceRecord;

pub use baseline::{BaselineBalancer, BaselineConfig, DomainConfig, LockCostModel};
pub use zone::{Spot, ZoneBalancer, ZoneConfig, ZonePolicy};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BalanceOutcome {
    pub migrated: u32,
    /// The pipeline ran but nothing moved.
    pub checked_only: bool,
    /// CPU chosen for a created or waking task, when the trigger placed one.
    pub placed_on: Option<CpuId>,
}

impl BalanceOutcome {
    pub(crate) fn checked() -> Self {
        Self {
            migrated: 0,
            checked_only: true,
            placed_on: None,
        }
    }

    pub(crate) fn moved(n: u32) -> Self {
        Self {
            migrated: n,
            checked_only: n == 0,
            placed_on: None,
        }
    }
}

/// Moves `tasks` from `src` to `dst` under a double lock: both CPUs become
/// non-preemptible for `lock_base_us + per_task_us * moved`, every moved task
/// pays the cache penalty on its pending burst, and `dst` is rechecked for
/// preemption (which takes effect once the window closes).
pub fn migrate(
    m: &mut Machine,
    src: CpuId,
    dst: CpuId,
    tasks: &[TaskId],
    lock: &LockCostModel,
) -> Result<u32, SimError> {
    if tasks.is_empty() || src == dst {
        return Ok(0);
    }
    let now = m.now();
    let window = lock.window_us(tasks.len());
    m.hold_nonpreemptible(src, window)?;
    m.hold_nonpreemptible(dst, window)?;
    let penalty = m.config().cache_penalty_us;
    for &t in tasks {
        m.dequeue_task(src, t)?;
        m.add_cache_penalty(t, penalty);
        m.metrics_mut().ledger.cache_penalty_total_us += penalty;
        m.trace_mut().record(TraceRecord::Migrate {
            at: now,
            src,
            dst,
            task: t,
        });
        m.enqueue_task(dst, t)?;
    }
    let metrics = m.metrics_mut();
    metrics.ledger.migrations += tasks.len() as u64;
    metrics.migration_log.push(MigrationRecord {
        at: now,
        src,
        dst,
        tasks: tasks.to_vec(),
        window_us: window,
    });
    m.resched_check(dst)?;
    Ok(tasks.len() as u32)
}

/// The active balancing policy for a run.
#[derive(Debug, Clone)]
pub enum Balancer {
    Baseline(BaselineBalancer),
    Zone(ZoneBalancer),
}

impl Balancer {
    /// `baseline`, or the zone policy name (`cold`, `warm_high`, ...).
    pub fn policy_name(&self) -> String {
        match self {
            Balancer::Baseline(_) => "baseline".to_string(),
            Balancer::Zone(z) => z.config().policy.name().to_string(),
        }
    }

    pub fn on_tick(&mut self, m: &mut Machine) {
        if let Balancer::Zone(z) = self {
            z.update_weights(m);
        }
    }

    /// CPUs that run a balance check at this tick.
    pub fn tick_targets(&self, m: &Machine) -> Vec<CpuId> {
        match self {
            Balancer::Baseline(_) => m.cpu_ids().collect(),
            Balancer::Zone(_) => m
                .busiest_cpu()
                .filter(|&c| m.cpu(c).current().is_some())
                .into_iter()
                .collect(),
        }
    }

    pub fn balance_check(
        &mut self,
        m: &mut Machine,
        cpu: CpuId,
    ) -> Result<BalanceOutcome, SimError> {
        match self {
            Balancer::Baseline(b) => Ok(b.rebalance_tick(m, cpu)?.unwrap_or_default()),
            Balancer::Zone(z) => z.on_trigger(m, zone::Trigger::TickBusiestMember(cpu)),
        }
    }

    pub fn place_new(&mut self, m: &mut Machine, task: TaskId) -> Result<CpuId, SimError> {
        let t = m.task(task);
        if let Some(cpu) = t.affinity {
            return Ok(cpu);
        }
        match self {
            Balancer::Baseline(_) => Ok(t.creator_cpu),
            Balancer::Zone(z) => {
                let out = z.on_trigger(m, zone::Trigger::TaskCreated(task))?;
                Ok(out.placed_on.unwrap_or(m.task(task).creator_cpu))
            }
        }
    }

    pub fn place_wakeup(&mut self, m: &mut Machine, task: TaskId) -> Result<CpuId, SimError> {
        let t = m.task(task);
        if let Some(cpu) = t.affinity {
            return Ok(cpu);
        }
        match self {
            Balancer::Baseline(_) => Ok(t.last_cpu),
            Balancer::Zone(z) => {
                let out = z.on_trigger(m, zone::Trigger::IdleWakeup(task))?;
                Ok(out.placed_on.unwrap_or(m.task(task).last_cpu))
            }
        }
    }
}
