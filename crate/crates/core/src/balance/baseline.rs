//! Vanilla periodic SMP balancing.
//!
//! Every tick each CPU runs `rebalance_tick`. Idle CPUs call `load_balance`
//! every 10 ms, busy ones every 100 ms. `load_balance` looks for the busiest
//! run queue in the (single, flat) domain and, when it is sufficiently above
//! the mean, pulls the most CPU-hungry movable tasks toward the calling CPU
//! under a double lock.

use serde::{Deserialize, Serialize};

use super::{migrate, BalanceOutcome};
use crate::engine::SimTime;
use crate::error::SimError;
use crate::sched::{CpuId, IdleState, Machine};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DomainConfig {
    pub balance_interval_idle_us: u64,
    pub balance_interval_busy_us: u64,
    pub imbalance_pct: u64,
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self {
            balance_interval_idle_us: 10_000,
            balance_interval_busy_us: 100_000,
            imbalance_pct: 25,
        }
    }
}

/// Cost of one double-locked migration batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LockCostModel {
    pub lock_base_us: u64,
    pub per_task_us: u64,
}

impl Default for LockCostModel {
    fn default() -> Self {
        Self {
            lock_base_us: 30,
            per_task_us: 20,
        }
    }
}

impl LockCostModel {
    pub fn window_us(&self, moved: usize) -> u64 {
        self.lock_base_us + self.per_task_us * moved as u64
    }
}

/// Scenario keys under `"baseline"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub balance_interval_idle_us: u64,
    pub balance_interval_busy_us: u64,
    pub imbalance_pct: u64,
    pub lock_base_us: u64,
    pub per_task_us: u64,
    pub max_move_per_balance: u32,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        let d = DomainConfig::default();
        let l = LockCostModel::default();
        Self {
            balance_interval_idle_us: d.balance_interval_idle_us,
            balance_interval_busy_us: d.balance_interval_busy_us,
            imbalance_pct: d.imbalance_pct,
            lock_base_us: l.lock_base_us,
            per_task_us: l.per_task_us,
            max_move_per_balance: 1,
        }
    }
}

impl BaselineConfig {
    pub fn domain(&self) -> DomainConfig {
        DomainConfig {
            balance_interval_idle_us: self.balance_interval_idle_us,
            balance_interval_busy_us: self.balance_interval_busy_us,
            imbalance_pct: self.imbalance_pct,
        }
    }

    pub fn lock(&self) -> LockCostModel {
        LockCostModel {
            lock_base_us: self.lock_base_us,
            per_task_us: self.per_task_us,
        }
    }
}

/// True when the busiest load exceeds the mean by more than `imbalance_pct`.
pub fn is_imbalanced(busiest_load: f64, avg_load: f64, imbalance_pct: u64) -> bool {
    busiest_load * 100.0 > avg_load * (100 + imbalance_pct) as f64
}

#[derive(Debug, Clone)]
pub struct BaselineBalancer {
    config: BaselineConfig,
    last_balance: Vec<SimTime>,
}

impl BaselineBalancer {
    pub fn new(config: BaselineConfig) -> Self {
        Self {
            config,
            last_balance: Vec::new(),
        }
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.config
    }

    pub fn last_balance(&self, cpu: CpuId) -> SimTime {
        self.last_balance
            .get(cpu.0)
            .copied()
            .unwrap_or(SimTime::ZERO)
    }

    pub fn set_last_balance(&mut self, cpu: CpuId, at: SimTime) {
        if self.last_balance.len() <= cpu.0 {
            self.last_balance.resize(cpu.0 + 1, SimTime::ZERO);
        }
        self.last_balance[cpu.0] = at;
    }

    fn interval_us(&self, idle: IdleState) -> u64 {
        match idle {
            IdleState::SchedIdle => self.config.balance_interval_idle_us,
            IdleState::NotIdle => self.config.balance_interval_busy_us,
        }
    }

    /// Runs `load_balance` for `cpu` once its idle-dependent interval has
    /// elapsed. Returns `None` when it was not yet due.
    pub fn rebalance_tick(
        &mut self,
        m: &mut Machine,
        cpu: CpuId,
    ) -> Result<Option<BalanceOutcome>, SimError> {
        let now = m.now();
        let interval = self.interval_us(m.cpu(cpu).idle_state());
        if now.since(self.last_balance(cpu)) < interval {
            return Ok(None);
        }
        self.set_last_balance(cpu, now);
        self.load_balance(m, cpu).map(Some)
    }

    /// One pass of the balancing pipeline on behalf of `cpu`.
    pub fn load_balance(
        &mut self,
        m: &mut Machine,
        cpu: CpuId,
    ) -> Result<BalanceOutcome, SimError> {
        m.metrics_mut().ledger.direct_checks += 1;
        let Some(busiest) = find_busiest_queue(m) else {
            return Ok(BalanceOutcome::checked());
        };
        if busiest == cpu
            || !is_imbalanced(
                m.cpu_utilization(busiest),
                m.avg_utilization(),
                self.config.imbalance_pct,
            )
        {
            return Ok(BalanceOutcome::checked());
        }
        let moved = self.move_tasks(m, busiest, cpu, self.config.max_move_per_balance as usize)?;
        Ok(BalanceOutcome::moved(moved))
    }

    /// Pulls up to `n` movable tasks from `src` to `dst`, highest usage first
    /// (lowest id on ties). Running and pinned tasks never move.
    pub fn move_tasks(
        &self,
        m: &mut Machine,
        src: CpuId,
        dst: CpuId,
        n: usize,
    ) -> Result<u32, SimError> {
        if src == dst || n == 0 {
            return Ok(0);
        }
        let mut candidates = m.movable_tasks(src);
        candidates.sort_by(|&a, &b| {
            m.task(b)
                .usage_pct
                .total_cmp(&m.task(a).usage_pct)
                .then(a.cmp(&b))
        });
        candidates.truncate(n);
        migrate(m, src, dst, &candidates, &self.config.lock())
    }
}

/// Highest-utilization CPU, lowest id on ties, `None` if all are idle.
pub fn find_busiest_queue(m: &Machine) -> Option<CpuId> {
    m.busiest_cpu()
}
