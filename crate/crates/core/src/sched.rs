//! Per-CPU run queues, dispatch and preemption, tick accounting and
//! utilization estimation. Both balancers operate on the [`Machine`] defined
//! here.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::balance::zone::WeightState;
use crate::engine::{EventKind, EventQueue, SimRng, SimTime};
use crate::error::SimError;
use crate::metrics::{LatencySample, LockInterval, MetricsStore};
use crate::trace::{Trace, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u32);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CpuId(pub usize);

impl fmt::Display for CpuId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CPU{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SchedClass {
    /// Fixed-priority FIFO, 1..=99, higher wins.
    RtFifo {
        priority: u8,
    },
    Normal,
}

impl SchedClass {
    /// Total order used for queueing and preemption. Every RT level beats
    /// every normal task.
    pub fn rank(self) -> u32 {
        match self {
            SchedClass::RtFifo { priority } => 100 + u32::from(priority),
            SchedClass::Normal => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TaskState {
    /// Registered, waiting for its `TaskCreate` event.
    NotStarted,
    Running,
    Runnable,
    Blocked,
    /// Between `dequeue_task` and the matching `enqueue_task`; never
    /// observable at an event boundary.
    Detached,
    Exited,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdleState {
    SchedIdle,
    NotIdle,
}

/// A duration drawn per use. JSON form is either a bare integer or
/// `{"uniform": [min, max]}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Dist {
    Constant(u64),
    Uniform { uniform: (u64, u64) },
}

impl Dist {
    pub fn uniform(min: u64, max: u64) -> Self {
        Dist::Uniform {
            uniform: (min, max),
        }
    }

    pub fn min(&self) -> u64 {
        match *self {
            Dist::Constant(v) => v,
            Dist::Uniform { uniform: (lo, _) } => lo,
        }
    }

    pub fn max(&self) -> u64 {
        match *self {
            Dist::Constant(v) => v,
            Dist::Uniform { uniform: (_, hi) } => hi,
        }
    }

    pub fn mean(&self) -> f64 {
        (self.min() + self.max()) as f64 / 2.0
    }

    pub fn sample(&self, rng: &mut SimRng) -> u64 {
        match *self {
            Dist::Constant(v) => v,
            Dist::Uniform { uniform: (lo, hi) } => rng.range_inclusive(lo, hi),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Phase {
    pub burst_us: Dist,
    pub block_us: Dist,
}

/// Repeating list of (CPU burst, blocking wait) phases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BehaviorScript {
    phases: Vec<Phase>,
}

impl BehaviorScript {
    /// Returns `None` for an empty script or a phase whose burst and block
    /// can both be zero, which would spin without advancing time.
    pub fn new(phases: Vec<Phase>) -> Option<Self> {
        let ok = !phases.is_empty()
            && phases.iter().all(|p| {
                p.burst_us.min() + p.block_us.min() > 0
                    && p.burst_us.min() <= p.burst_us.max()
                    && p.block_us.min() <= p.block_us.max()
            });
        ok.then_some(Self { phases })
    }

    pub fn single(burst_us: Dist, block_us: Dist) -> Option<Self> {
        Self::new(vec![Phase { burst_us, block_us }])
    }

    pub fn phases(&self) -> &[Phase] {
        &self.phases
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Behavior {
    Script(BehaviorScript),
    /// Wakes at absolute multiples of `period_us` after creation, runs
    /// `burst_us`, sleeps again. Dispatch delays are recorded as latency
    /// samples.
    Periodic {
        period_us: u64,
        burst_us: u64,
    },
}

/// Everything needed to register a task before the run starts.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub class: SchedClass,
    pub affinity: Option<CpuId>,
    pub behavior: Behavior,
    pub start_at: SimTime,
    pub creator_cpu: CpuId,
    pub lifetime_us: Option<u64>,
}

/// Fixed-capacity ring of per-tick busy microseconds.
#[derive(Debug, Clone)]
pub struct UtilWindow {
    slots: VecDeque<u64>,
    capacity: usize,
    sum: u64,
}

impl UtilWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            slots: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
            sum: 0,
        }
    }

    pub fn push(&mut self, busy_us: u64) {
        if self.slots.len() == self.capacity {
            self.sum -= self.slots.pop_front().unwrap_or(0);
        }
        self.slots.push_back(busy_us);
        self.sum += busy_us;
    }

    /// Busy share of the whole window, in percent. Slots not yet filled
    /// count as idle.
    pub fn percent(&self, slot_us: u64) -> f64 {
        if slot_us == 0 {
            return 0.0;
        }
        let span = self.capacity as u64 * slot_us;
        (self.sum as f64 * 100.0 / span as f64).min(100.0)
    }

    /// Replaces the history with a full window at the given busy share.
    pub fn fill(&mut self, pct: f64, slot_us: u64) {
        let per_slot = ((pct.clamp(0.0, 100.0) / 100.0) * slot_us as f64).round() as u64;
        self.slots.clear();
        self.sum = 0;
        for _ in 0..self.capacity {
            self.push(per_slot);
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Task {
    pub id: TaskId,
    pub class: SchedClass,
    pub affinity: Option<CpuId>,
    pub behavior: Behavior,
    pub state: TaskState,
    pub weight: WeightState,
    pub last_cpu: CpuId,
    pub creator_cpu: CpuId,
    pub start_at: SimTime,
    pub expires_at: Option<SimTime>,
    /// Executed share of the utilization window, 0..=100.
    pub usage_pct: f64,
    usage: UtilWindow,
    tick_busy: u64,
    remaining_us: u64,
    phase: usize,
    wake_request: Option<SimTime>,
}

impl Task {
    pub fn is_probe(&self) -> bool {
        matches!(self.behavior, Behavior::Periodic { .. })
    }

    pub fn is_alive(&self) -> bool {
        !matches!(self.state, TaskState::NotStarted | TaskState::Exited)
    }

    pub fn remaining_us(&self) -> u64 {
        self.remaining_us
    }
}

#[derive(Debug, Clone)]
pub struct RunQueue {
    pub cpu: CpuId,
    /// `(rank, task)` in descending rank; FIFO within a rank.
    queue: Vec<(u32, TaskId)>,
    current: Option<TaskId>,
    /// Utilization over the sliding window, refreshed every tick.
    pub cpu_load: f64,
    nonpreemptible_until: Option<SimTime>,
    window: UtilWindow,
    tick_busy: u64,
    acct_mark: SimTime,
    slice_start: SimTime,
    dispatch_token: u64,
}

impl RunQueue {
    fn new(cpu: CpuId, window_slots: usize) -> Self {
        Self {
            cpu,
            queue: Vec::new(),
            current: None,
            cpu_load: 0.0,
            nonpreemptible_until: None,
            window: UtilWindow::new(window_slots),
            tick_busy: 0,
            acct_mark: SimTime::ZERO,
            slice_start: SimTime::ZERO,
            dispatch_token: 0,
        }
    }

    pub fn current(&self) -> Option<TaskId> {
        self.current
    }

    pub fn queued(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.queue.iter().map(|&(_, t)| t)
    }

    pub fn nr_running(&self) -> usize {
        self.queue.len() + usize::from(self.current.is_some())
    }

    pub fn idle_state(&self) -> IdleState {
        if self.nr_running() == 0 {
            IdleState::SchedIdle
        } else {
            IdleState::NotIdle
        }
    }

    pub fn nonpreemptible_until(&self) -> Option<SimTime> {
        self.nonpreemptible_until
    }

    pub fn is_preemptible(&self, now: SimTime) -> bool {
        self.nonpreemptible_until.is_none_or(|until| now >= until)
    }

    fn contains(&self, task: TaskId) -> bool {
        self.current == Some(task) || self.queue.iter().any(|&(_, t)| t == task)
    }

    /// Behind every task of equal or higher rank.
    fn insert_tail(&mut self, rank: u32, task: TaskId) {
        let pos = self.queue.partition_point(|&(r, _)| r >= rank);
        self.queue.insert(pos, (rank, task));
    }

    /// Ahead of every task of equal rank (preempted tasks resume first).
    fn insert_head(&mut self, rank: u32, task: TaskId) {
        let pos = self.queue.partition_point(|&(r, _)| r > rank);
        self.queue.insert(pos, (rank, task));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineConfig {
    pub n_cpus: usize,
    pub tick_us: u64,
    pub util_window_us: u64,
    pub cache_penalty_us: u64,
    pub normal_timeslice_us: u64,
}

impl Default for MachineConfig {
    fn default() -> Self {
        Self {
            n_cpus: 4,
            tick_us: 1000,
            util_window_us: 100_000,
            cache_penalty_us: 200,
            normal_timeslice_us: 4000,
        }
    }
}

impl MachineConfig {
    pub fn window_slots(&self) -> usize {
        (self.util_window_us / self.tick_us.max(1)).max(1) as usize
    }
}

/// Whole-system scheduler state: run queues, task table, clock, RNG and the
/// metrics being collected.
pub struct Machine {
    config: MachineConfig,
    cpus: Vec<RunQueue>,
    tasks: Vec<Task>,
    queue: EventQueue,
    rng: SimRng,
    metrics: MetricsStore,
    trace: Trace,
    live: usize,
}

impl Machine {
    pub fn new(config: MachineConfig, rng: SimRng) -> Self {
        let slots = config.window_slots();
        Self {
            cpus: (0..config.n_cpus.max(1))
                .map(|c| RunQueue::new(CpuId(c), slots))
                .collect(),
            config,
            tasks: Vec::new(),
            queue: EventQueue::new(),
            rng,
            metrics: MetricsStore::default(),
            trace: Trace::default(),
            live: 0,
        }
    }

    pub fn config(&self) -> &MachineConfig {
        &self.config
    }

    pub fn now(&self) -> SimTime {
        self.queue.now()
    }

    pub fn n_cpus(&self) -> usize {
        self.cpus.len()
    }

    pub fn cpu_ids(&self) -> impl Iterator<Item = CpuId> {
        (0..self.cpus.len()).map(CpuId)
    }

    pub fn cpu(&self, cpu: CpuId) -> &RunQueue {
        &self.cpus[cpu.0]
    }

    pub fn cpus(&self) -> &[RunQueue] {
        &self.cpus
    }

    pub fn task(&self, id: TaskId) -> &Task {
        &self.tasks[id.0 as usize]
    }

    pub fn task_mut(&mut self, id: TaskId) -> &mut Task {
        &mut self.tasks[id.0 as usize]
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn live_tasks(&self) -> usize {
        self.live
    }

    pub fn blocked_tasks(&self) -> usize {
        self.tasks
            .iter()
            .filter(|t| t.state == TaskState::Blocked)
            .count()
    }

    pub fn metrics(&self) -> &MetricsStore {
        &self.metrics
    }

    pub fn metrics_mut(&mut self) -> &mut MetricsStore {
        &mut self.metrics
    }

    pub fn take_metrics(&mut self) -> MetricsStore {
        std::mem::take(&mut self.metrics)
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn trace_mut(&mut self) -> &mut Trace {
        &mut self.trace
    }

    pub fn rng_mut(&mut self) -> &mut SimRng {
        &mut self.rng
    }

    pub(crate) fn queue(&self) -> &EventQueue {
        &self.queue
    }

    pub(crate) fn queue_mut(&mut self) -> &mut EventQueue {
        &mut self.queue
    }

    pub fn schedule(&mut self, at: SimTime, kind: EventKind) -> Result<u64, SimError> {
        self.queue.schedule(at, kind)
    }

    fn check_cpu(&self, cpu: CpuId) -> Result<(), SimError> {
        if cpu.0 < self.cpus.len() {
            Ok(())
        } else {
            Err(SimError::UnknownCpu(cpu))
        }
    }

    fn check_task(&self, task: TaskId) -> Result<(), SimError> {
        if (task.0 as usize) < self.tasks.len() {
            Ok(())
        } else {
            Err(SimError::UnknownTask(task))
        }
    }

    /// Registers a task and schedules its creation event.
    pub fn add_task(&mut self, spec: TaskSpec) -> Result<TaskId, SimError> {
        self.check_cpu(spec.creator_cpu)?;
        if let Some(a) = spec.affinity {
            self.check_cpu(a)?;
        }
        let id = TaskId(self.tasks.len() as u32);
        let home = spec.affinity.unwrap_or(spec.creator_cpu);
        self.tasks.push(Task {
            id,
            class: spec.class,
            affinity: spec.affinity,
            behavior: spec.behavior,
            state: TaskState::NotStarted,
            weight: WeightState::default(),
            last_cpu: home,
            creator_cpu: spec.creator_cpu,
            start_at: spec.start_at,
            expires_at: spec.lifetime_us.map(|l| spec.start_at + l),
            usage_pct: 0.0,
            usage: UtilWindow::new(self.config.window_slots()),
            tick_busy: 0,
            remaining_us: 0,
            phase: 0,
            wake_request: None,
        });
        self.schedule(spec.start_at.max(self.now()), EventKind::TaskCreate(id))?;
        Ok(id)
    }

    fn sample_burst(&mut self, id: TaskId) -> u64 {
        let task = &self.tasks[id.0 as usize];
        match &task.behavior {
            Behavior::Script(s) => {
                let d = s.phases[task.phase].burst_us;
                d.sample(&mut self.rng)
            }
            Behavior::Periodic { burst_us, .. } => *burst_us,
        }
    }

    /// Puts a task on `cpu`'s run queue and runs the preemption check.
    pub fn enqueue_task(&mut self, cpu: CpuId, id: TaskId) -> Result<(), SimError> {
        self.check_cpu(cpu)?;
        self.check_task(id)?;
        let task = &self.tasks[id.0 as usize];
        if matches!(task.state, TaskState::Runnable | TaskState::Running)
            || self.cpus.iter().any(|rq| rq.contains(id))
        {
            return Err(SimError::DoubleEnqueue { task: id });
        }
        if let Some(pinned) = task.affinity {
            if pinned != cpu {
                return Err(SimError::AffinityViolation {
                    task: id,
                    pinned,
                    cpu,
                });
            }
        }
        let rank = task.class.rank();
        self.cpus[cpu.0].insert_tail(rank, id);
        let task = &mut self.tasks[id.0 as usize];
        task.state = TaskState::Runnable;
        task.last_cpu = cpu;
        self.resched_check(cpu)
    }

    /// Removes a queued (not running) task from `cpu`. The task is detached
    /// until it is enqueued somewhere again.
    pub fn dequeue_task(&mut self, cpu: CpuId, id: TaskId) -> Result<(), SimError> {
        self.check_cpu(cpu)?;
        self.check_task(id)?;
        let rq = &mut self.cpus[cpu.0];
        if rq.current == Some(id) {
            return Err(SimError::DequeueRunning { task: id, cpu });
        }
        let Some(pos) = rq.queue.iter().position(|&(_, t)| t == id) else {
            return Err(SimError::NotQueued { task: id, cpu });
        };
        rq.queue.remove(pos);
        self.tasks[id.0 as usize].state = TaskState::Detached;
        Ok(())
    }

    /// Dispatches or preempts on `cpu` if the queue head outranks the
    /// current task and the CPU is not inside a non-preemptible window.
    pub fn resched_check(&mut self, cpu: CpuId) -> Result<(), SimError> {
        let now = self.now();
        let rq = &self.cpus[cpu.0];
        if !rq.is_preemptible(now) {
            return Ok(());
        }
        let Some(&(head_rank, _)) = rq.queue.first() else {
            return Ok(());
        };
        match rq.current {
            None => self.dispatch_next(cpu),
            Some(cur) => {
                if head_rank > self.tasks[cur.0 as usize].class.rank() {
                    self.trace.record(TraceRecord::Preempt {
                        at: now,
                        cpu,
                        task: cur,
                    });
                    self.stop_current(cpu, true);
                    self.dispatch_next(cpu)
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Charges the running task's execution up to now.
    fn account(&mut self, cpu: CpuId) {
        let now = self.now();
        let rq = &mut self.cpus[cpu.0];
        let elapsed = now.since(rq.acct_mark);
        rq.acct_mark = now;
        if let Some(cur) = rq.current {
            rq.tick_busy += elapsed;
            let task = &mut self.tasks[cur.0 as usize];
            task.tick_busy += elapsed;
            task.remaining_us = task.remaining_us.saturating_sub(elapsed);
        }
    }

    /// Takes the running task off the CPU and requeues it, at the head of
    /// its priority level if `preempted`, else at the tail.
    fn stop_current(&mut self, cpu: CpuId, preempted: bool) {
        self.account(cpu);
        let rq = &mut self.cpus[cpu.0];
        let Some(cur) = rq.current.take() else {
            return;
        };
        rq.dispatch_token += 1;
        let rank = self.tasks[cur.0 as usize].class.rank();
        if preempted {
            rq.insert_head(rank, cur);
        } else {
            rq.insert_tail(rank, cur);
        }
        self.tasks[cur.0 as usize].state = TaskState::Runnable;
    }

    fn dispatch_next(&mut self, cpu: CpuId) -> Result<(), SimError> {
        let now = self.now();
        let rq = &mut self.cpus[cpu.0];
        debug_assert!(rq.current.is_none());
        if rq.queue.is_empty() {
            return Ok(());
        }
        let (_, id) = rq.queue.remove(0);
        rq.current = Some(id);
        rq.acct_mark = now;
        rq.slice_start = now;
        rq.dispatch_token += 1;
        let token = rq.dispatch_token;
        let task = &mut self.tasks[id.0 as usize];
        task.state = TaskState::Running;
        task.last_cpu = cpu;
        let remaining = task.remaining_us;
        let probe = task.is_probe();
        if let Some(wake) = task.wake_request.take() {
            if probe {
                if now < wake {
                    return Err(SimError::Invariant {
                        at: now,
                        what: format!("{id} dispatched before its wakeup at {wake}"),
                    });
                }
                self.metrics.samples.push(LatencySample {
                    wake_time: wake,
                    dispatch_time: now,
                    cpu,
                });
            }
        }
        self.trace.record(TraceRecord::Dispatch {
            at: now,
            cpu,
            task: id,
        });
        self.schedule(now + remaining, EventKind::BurstEnd { cpu, token })?;
        Ok(())
    }

    /// Creation: a script task becomes runnable on `cpu`; a periodic task
    /// sleeps until its first period boundary.
    pub fn start_task(&mut self, id: TaskId, cpu: CpuId) -> Result<(), SimError> {
        self.check_task(id)?;
        self.check_cpu(cpu)?;
        if self.tasks[id.0 as usize].state != TaskState::NotStarted {
            return Err(SimError::DoubleEnqueue { task: id });
        }
        let now = self.now();
        self.live += 1;
        self.metrics.tasks_started += 1;
        self.trace.record(TraceRecord::Place {
            at: now,
            task: id,
            cpu,
        });
        if cpu != self.tasks[id.0 as usize].creator_cpu {
            self.metrics.placements += 1;
        }
        let task = &mut self.tasks[id.0 as usize];
        task.last_cpu = cpu;
        match task.behavior {
            Behavior::Periodic { period_us, .. } => {
                task.state = TaskState::Blocked;
                self.schedule(now + period_us, EventKind::TaskWakeup(id))?;
                Ok(())
            }
            Behavior::Script(_) => {
                let burst = self.sample_burst(id);
                self.tasks[id.0 as usize].remaining_us = burst;
                self.tasks[id.0 as usize].state = TaskState::Blocked;
                self.enqueue_task(cpu, id)
            }
        }
    }

    /// Exits a blocked task whose lifetime has run out. Returns whether it
    /// exited.
    pub fn expire_if_due(&mut self, id: TaskId) -> Result<bool, SimError> {
        self.check_task(id)?;
        let now = self.now();
        let task = &self.tasks[id.0 as usize];
        if task.state == TaskState::Blocked && task.expires_at.is_some_and(|e| now >= e) {
            self.exit_task(id);
            return Ok(true);
        }
        Ok(false)
    }

    fn exit_task(&mut self, id: TaskId) {
        let now = self.now();
        self.tasks[id.0 as usize].state = TaskState::Exited;
        self.live -= 1;
        self.metrics.tasks_exited += 1;
        self.trace.record(TraceRecord::Exit { at: now, task: id });
    }

    /// Wakeup of a blocked task onto `cpu`. A CPU other than the task's
    /// previous one costs the cache penalty on the new burst.
    pub fn wake_task(&mut self, id: TaskId, cpu: CpuId) -> Result<(), SimError> {
        self.check_task(id)?;
        self.check_cpu(cpu)?;
        let now = self.now();
        if self.tasks[id.0 as usize].state != TaskState::Blocked {
            return Err(SimError::DoubleEnqueue { task: id });
        }
        let mut burst = self.sample_burst(id);
        if cpu != self.tasks[id.0 as usize].last_cpu {
            burst += self.config.cache_penalty_us;
            self.metrics.ledger.cache_penalty_total_us += self.config.cache_penalty_us;
            self.metrics.placements += 1;
            self.trace.record(TraceRecord::Place {
                at: now,
                task: id,
                cpu,
            });
        }
        let task = &mut self.tasks[id.0 as usize];
        task.remaining_us = burst;
        task.wake_request = Some(now);
        self.enqueue_task(cpu, id)
    }

    /// Completion of the running task's burst on `cpu`. Stale events from
    /// preempted dispatches are ignored.
    pub fn burst_end(&mut self, cpu: CpuId, token: u64) -> Result<(), SimError> {
        self.check_cpu(cpu)?;
        let rq = &self.cpus[cpu.0];
        if rq.dispatch_token != token {
            return Ok(());
        }
        let Some(id) = rq.current else {
            return Ok(());
        };
        self.account(cpu);
        let now = self.now();
        let rq = &mut self.cpus[cpu.0];
        rq.current = None;
        rq.dispatch_token += 1;

        let idx = id.0 as usize;
        let next_block = match &self.tasks[idx].behavior {
            Behavior::Periodic { period_us, .. } => Err(*period_us),
            Behavior::Script(script) => Ok((
                script.phases.len(),
                script.phases[self.tasks[idx].phase].block_us,
            )),
        };
        match next_block {
            Err(period_us) => {
                // absolute schedule anchored at the start time
                let period = period_us.max(1);
                let start = self.tasks[idx].start_at;
                let next = start + (now.since(start) / period + 1) * period;
                self.tasks[idx].state = TaskState::Blocked;
                self.trace.record(TraceRecord::Block {
                    at: now,
                    cpu,
                    task: id,
                    until: next,
                });
                self.schedule(next, EventKind::TaskWakeup(id))?;
            }
            Ok((n_phases, block_dist)) => {
                let block = block_dist.sample(&mut self.rng);
                let task = &mut self.tasks[idx];
                task.phase = (task.phase + 1) % n_phases;
                if task.expires_at.is_some_and(|e| now >= e) {
                    self.exit_task(id);
                } else if block > 0 {
                    task.state = TaskState::Blocked;
                    let until = now + block;
                    self.trace.record(TraceRecord::Block {
                        at: now,
                        cpu,
                        task: id,
                        until,
                    });
                    self.schedule(until, EventKind::TaskWakeup(id))?;
                } else {
                    let burst = self.sample_burst(id);
                    let task = &mut self.tasks[idx];
                    task.remaining_us = burst;
                    task.state = TaskState::Runnable;
                    let rank = task.class.rank();
                    self.cpus[cpu.0].insert_tail(rank, id);
                }
            }
        }
        self.resched_check(cpu)
    }

    /// Extends a queued task's pending burst, modelling lost cache warmth
    /// after a move.
    pub fn add_cache_penalty(&mut self, task: TaskId, penalty_us: u64) {
        self.tasks[task.0 as usize].remaining_us += penalty_us;
    }

    /// Marks `cpu` non-preemptible for `len_us` from now and records the
    /// interval in the cost ledger.
    pub fn hold_nonpreemptible(&mut self, cpu: CpuId, len_us: u64) -> Result<(), SimError> {
        self.check_cpu(cpu)?;
        let now = self.now();
        let end = now + len_us;
        let rq = &mut self.cpus[cpu.0];
        rq.nonpreemptible_until = Some(rq.nonpreemptible_until.map_or(end, |u| u.max(end)));
        let interval = LockInterval {
            cpu,
            start: now,
            end,
        };
        self.metrics.ledger.record_lock(interval);
        self.trace.record(TraceRecord::LockWindow {
            cpu,
            start: now,
            end,
        });
        self.schedule(end, EventKind::LockRelease(cpu))?;
        Ok(())
    }

    pub fn lock_release(&mut self, cpu: CpuId) -> Result<(), SimError> {
        self.check_cpu(cpu)?;
        let now = self.now();
        let rq = &mut self.cpus[cpu.0];
        if rq.nonpreemptible_until.is_some_and(|u| now >= u) {
            rq.nonpreemptible_until = None;
            self.resched_check(cpu)?;
        }
        Ok(())
    }

    /// Periodic accounting: closes the current tick slot of every CPU and
    /// task, refreshes utilization and enforces the normal-class timeslice.
    pub fn on_tick(&mut self) -> Result<(), SimError> {
        let now = self.now();
        let tick_us = self.config.tick_us;
        for c in 0..self.cpus.len() {
            self.account(CpuId(c));
            let rq = &mut self.cpus[c];
            let busy = std::mem::take(&mut rq.tick_busy);
            rq.window.push(busy);
            rq.cpu_load = rq.window.percent(tick_us);
            let load = rq.cpu_load;
            self.metrics.observe_utilization(load);
        }
        for task in self.tasks.iter_mut().filter(|t| t.is_alive()) {
            let busy = std::mem::take(&mut task.tick_busy);
            task.usage.push(busy);
            task.usage_pct = task.usage.percent(tick_us);
        }
        let slice = self.config.normal_timeslice_us;
        for c in 0..self.cpus.len() {
            let cpu = CpuId(c);
            let rq = &self.cpus[c];
            let Some(cur) = rq.current else { continue };
            if !rq.is_preemptible(now)
                || self.tasks[cur.0 as usize].class != SchedClass::Normal
                || now.since(rq.slice_start) < slice
                || rq.queue.is_empty()
            {
                continue;
            }
            self.stop_current(cpu, false);
            self.dispatch_next(cpu)?;
        }
        Ok(())
    }

    /// Closes open execution intervals at the end of the run.
    pub fn finish(&mut self) {
        for c in 0..self.cpus.len() {
            self.account(CpuId(c));
        }
    }

    pub fn cpu_utilization(&self, cpu: CpuId) -> f64 {
        self.cpus[cpu.0].cpu_load
    }

    pub fn avg_utilization(&self) -> f64 {
        let n = self.cpus.len() as f64;
        self.cpus.iter().map(|rq| rq.cpu_load).sum::<f64>() / n
    }

    /// Highest utilization, lowest id on ties; `None` when every CPU is at 0.
    pub fn busiest_cpu(&self) -> Option<CpuId> {
        let mut best: Option<(CpuId, f64)> = None;
        for rq in &self.cpus {
            if best.is_none_or(|(_, l)| rq.cpu_load > l) {
                best = Some((rq.cpu, rq.cpu_load));
            }
        }
        best.filter(|&(_, l)| l > 0.0).map(|(c, _)| c)
    }

    /// Lowest utilization; ties go to the shorter run queue, then lowest id.
    pub fn least_loaded_cpu(&self) -> CpuId {
        self.cpus
            .iter()
            .min_by(|a, b| {
                a.cpu_load
                    .total_cmp(&b.cpu_load)
                    .then(a.nr_running().cmp(&b.nr_running()))
                    .then(a.cpu.cmp(&b.cpu))
            })
            .map(|rq| rq.cpu)
            .unwrap_or(CpuId(0))
    }

    /// Queued, unpinned tasks on `cpu`, in queue order.
    pub fn movable_tasks(&self, cpu: CpuId) -> Vec<TaskId> {
        self.cpus[cpu.0]
            .queued()
            .filter(|&t| self.tasks[t.0 as usize].affinity.is_none())
            .collect()
    }

    /// Loads a full window of history at `pct` busy for `cpu`.
    pub fn seed_utilization(&mut self, cpu: CpuId, pct: f64) {
        let tick = self.config.tick_us;
        let rq = &mut self.cpus[cpu.0];
        rq.window.fill(pct, tick);
        rq.cpu_load = rq.window.percent(tick);
    }

    /// Loads a full window of usage history at `pct` for `task`.
    pub fn seed_task_usage(&mut self, task: TaskId, pct: f64) {
        let tick = self.config.tick_us;
        let t = &mut self.tasks[task.0 as usize];
        t.usage.fill(pct, tick);
        t.usage_pct = t.usage.percent(tick);
    }

    /// Verifies task conservation, queue bookkeeping, affinity and
    /// utilization bounds.
    pub fn check_invariants(&self) -> Result<(), SimError> {
        let at = self.now();
        let fail = |what: String| Err(SimError::Invariant { at, what });
        let mut seen = vec![0u32; self.tasks.len()];
        for rq in &self.cpus {
            let nr = rq.nr_running();
            if (rq.idle_state() == IdleState::SchedIdle) != (nr == 0) {
                return fail(format!("{} idle_state disagrees with nr_running", rq.cpu));
            }
            if !(0.0..=100.0).contains(&rq.cpu_load) {
                return fail(format!(
                    "{} utilization {} out of range",
                    rq.cpu, rq.cpu_load
                ));
            }
            if let Some(cur) = rq.current {
                if self.tasks[cur.0 as usize].state != TaskState::Running {
                    return fail(format!("{cur} is current on {} but not Running", rq.cpu));
                }
            }
            for w in rq.queue.windows(2) {
                if w[0].0 < w[1].0 {
                    return fail(format!("{} queue out of priority order", rq.cpu));
                }
            }
            for t in rq.current.into_iter().chain(rq.queued()) {
                seen[t.0 as usize] += 1;
                let task = &self.tasks[t.0 as usize];
                if task.affinity.is_some_and(|a| a != rq.cpu) {
                    return fail(format!("pinned {t} found on {}", rq.cpu));
                }
                if rq.current != Some(t) && task.state != TaskState::Runnable {
                    return fail(format!("{t} queued on {} but {:?}", rq.cpu, task.state));
                }
            }
        }
        let mut on_queues = 0usize;
        let mut blocked = 0usize;
        let mut live = 0usize;
        for (task, &count) in self.tasks.iter().zip(&seen) {
            let expected = match task.state {
                TaskState::Running | TaskState::Runnable => 1,
                TaskState::Detached => {
                    return fail(format!("{} detached at an event boundary", task.id));
                }
                _ => 0,
            };
            if count != expected {
                return fail(format!(
                    "{} ({:?}) appears {count} times in run queues",
                    task.id, task.state
                ));
            }
            on_queues += count as usize;
            if task.state == TaskState::Blocked {
                blocked += 1;
            }
            if task.is_alive() {
                live += 1;
                if !(0.0..=100.0).contains(&task.usage_pct) {
                    return fail(format!("{} usage {} out of range", task.id, task.usage_pct));
                }
            }
        }
        if live != self.live || on_queues + blocked != live {
            return fail(format!(
                "conservation: {on_queues} queued + {blocked} blocked != {live} live (tracked {})",
                self.live
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn machine(n: usize) -> Machine {
        Machine::new(
            MachineConfig {
                n_cpus: n,
                ..MachineConfig::default()
            },
            SimRng::new(3),
        )
    }

    fn spec(class: SchedClass, affinity: Option<CpuId>, burst: u64, block: u64) -> TaskSpec {
        TaskSpec {
            class,
            affinity,
            behavior: Behavior::Script(
                BehaviorScript::single(Dist::Constant(burst), Dist::Constant(block)).unwrap(),
            ),
            start_at: SimTime::ZERO,
            creator_cpu: affinity.unwrap_or(CpuId(0)),
            lifetime_us: None,
        }
    }

    fn rt(p: u8) -> SchedClass {
        SchedClass::RtFifo { priority: p }
    }

    /// Registers and starts a task on `cpu` right now, bypassing the event
    /// queue.
    fn start(m: &mut Machine, class: SchedClass, cpu: CpuId, burst: u64) -> TaskId {
        let id = m.add_task(spec(class, None, burst, 1000)).unwrap();
        m.start_task(id, cpu).unwrap();
        id
    }

    #[test]
    fn rt_task_dispatches_immediately_on_idle_cpu() {
        let mut m = machine(1);
        let t = start(&mut m, rt(99), CpuId(0), 500);
        assert_eq!(m.cpu(CpuId(0)).current(), Some(t));
        assert_eq!(m.task(t).state, TaskState::Running);
    }

    #[test]
    fn normal_task_waits_behind_running_rt() {
        let mut m = machine(1);
        let r = start(&mut m, rt(10), CpuId(0), 500);
        let n = start(&mut m, SchedClass::Normal, CpuId(0), 500);
        assert_eq!(m.cpu(CpuId(0)).current(), Some(r));
        assert_eq!(m.task(n).state, TaskState::Runnable);
        assert_eq!(m.cpu(CpuId(0)).nr_running(), 2);
    }

    #[test]
    fn higher_rt_priority_preempts() {
        let mut m = machine(1);
        let low = start(&mut m, rt(50), CpuId(0), 500);
        let high = start(&mut m, rt(99), CpuId(0), 500);
        assert_eq!(m.cpu(CpuId(0)).current(), Some(high));
        // preempted task resumes first among its level
        assert_eq!(m.cpu(CpuId(0)).queued().next(), Some(low));
    }

    #[test]
    fn normal_does_not_preempt_normal() {
        let mut m = machine(1);
        let a = start(&mut m, SchedClass::Normal, CpuId(0), 10_000);
        let _b = start(&mut m, SchedClass::Normal, CpuId(0), 10_000);
        assert_eq!(m.cpu(CpuId(0)).current(), Some(a));
    }

    #[test]
    fn double_enqueue_is_rejected() {
        let mut m = machine(2);
        let t = start(&mut m, SchedClass::Normal, CpuId(0), 500);
        assert_eq!(
            m.enqueue_task(CpuId(1), t),
            Err(SimError::DoubleEnqueue { task: t })
        );
    }

    #[test]
    fn dequeue_rules() {
        let mut m = machine(2);
        let running = start(&mut m, SchedClass::Normal, CpuId(0), 500);
        let queued = start(&mut m, SchedClass::Normal, CpuId(0), 500);
        assert_eq!(
            m.dequeue_task(CpuId(0), running),
            Err(SimError::DequeueRunning {
                task: running,
                cpu: CpuId(0)
            })
        );
        assert_eq!(
            m.dequeue_task(CpuId(1), queued),
            Err(SimError::NotQueued {
                task: queued,
                cpu: CpuId(1)
            })
        );
        let before = m.cpus().iter().map(RunQueue::nr_running).sum::<usize>();
        m.dequeue_task(CpuId(0), queued).unwrap();
        assert_eq!(m.cpu(CpuId(0)).nr_running(), 1);
        m.enqueue_task(CpuId(1), queued).unwrap();
        let after = m.cpus().iter().map(RunQueue::nr_running).sum::<usize>();
        assert_eq!(before, after);
        m.check_invariants().unwrap();
    }

    #[test]
    fn idle_state_follows_nr_running() {
        let mut m = machine(1);
        assert_eq!(m.cpu(CpuId(0)).idle_state(), IdleState::SchedIdle);
        start(&mut m, SchedClass::Normal, CpuId(0), 500);
        assert_eq!(m.cpu(CpuId(0)).idle_state(), IdleState::NotIdle);
    }

    #[test]
    fn pinned_task_cannot_be_enqueued_elsewhere() {
        let mut m = machine(2);
        let id = m
            .add_task(spec(SchedClass::Normal, Some(CpuId(1)), 100, 100))
            .unwrap();
        m.task_mut(id).state = TaskState::Blocked;
        assert!(matches!(
            m.enqueue_task(CpuId(0), id),
            Err(SimError::AffinityViolation { .. })
        ));
    }

    #[test]
    fn nonpreemptible_window_delays_rt_wakeup() {
        // wake at 100, window until 160: dispatch at 160, 60us of lock delay
        let mut m = machine(1);
        let _low = start(&mut m, rt(10), CpuId(0), 10_000);
        let probe = m
            .add_task(TaskSpec {
                class: rt(99),
                affinity: Some(CpuId(0)),
                behavior: Behavior::Periodic {
                    period_us: 1_000_000,
                    burst_us: 1,
                },
                start_at: SimTime::ZERO,
                creator_cpu: CpuId(0),
                lifetime_us: None,
            })
            .unwrap();
        m.start_task(probe, CpuId(0)).unwrap();
        // creation events are handled by hand above
        while m.queue().peek().is_some_and(|e| e.at == SimTime::ZERO) {
            m.queue_mut().pop();
        }
        m.queue_mut().advance_clock(SimTime(40));
        m.hold_nonpreemptible(CpuId(0), 120).unwrap();
        m.queue_mut().advance_clock(SimTime(100));
        m.wake_task(probe, CpuId(0)).unwrap();
        assert_ne!(m.cpu(CpuId(0)).current(), Some(probe));
        // drain until the release fires
        while let Some(ev) = m.queue_mut().pop() {
            if let EventKind::LockRelease(cpu) = ev.kind {
                m.lock_release(cpu).unwrap();
                break;
            }
        }
        assert_eq!(m.now(), SimTime(160));
        assert_eq!(m.cpu(CpuId(0)).current(), Some(probe));
        let s = m.metrics().samples[0];
        assert_eq!(s.latency_us(), 60);
        // oracle: max(0, until - wake) + queue delay (none for prio 99)
        assert_eq!(s.latency_us(), 160u64.saturating_sub(100));
    }

    #[test]
    fn window_utilization_ratios() {
        let mut w = UtilWindow::new(100);
        for i in 0..100 {
            w.push(if i < 25 { 1000 } else { 0 });
        }
        assert_eq!(w.percent(1000), 25.0);
        let mut full = UtilWindow::new(100);
        (0..100).for_each(|_| full.push(1000));
        assert_eq!(full.percent(1000), 100.0);
        let mut idle = UtilWindow::new(100);
        (0..100).for_each(|_| idle.push(0));
        assert_eq!(idle.percent(1000), 0.0);
        let mut w85 = UtilWindow::new(100);
        for i in 0..100 {
            w85.push(if i < 85 { 1000 } else { 0 });
        }
        assert_eq!(w85.percent(1000), 85.0);
    }

    #[test]
    fn window_slides() {
        let mut w = UtilWindow::new(4);
        for b in [1000, 1000, 0, 0, 0, 0] {
            w.push(b);
        }
        assert_eq!(w.percent(1000), 0.0);
        assert_eq!(w.len(), 4);
    }

    #[test]
    fn average_utilization_of_quad_core_example() {
        let mut m = machine(4);
        for (c, pct) in [50.0, 85.0, 25.0, 55.0].into_iter().enumerate() {
            m.seed_utilization(CpuId(c), pct);
        }
        assert_eq!(m.avg_utilization(), 53.75);
        assert_eq!(m.cpu_utilization(CpuId(1)), 85.0);
        assert_eq!(m.busiest_cpu(), Some(CpuId(1)));
        assert_eq!(m.least_loaded_cpu(), CpuId(2));
    }

    #[test]
    fn average_of_trivial_vectors() {
        let m = machine(4);
        assert_eq!(m.avg_utilization(), 0.0);
        let mut one = machine(1);
        one.seed_utilization(CpuId(0), 42.0);
        assert_eq!(one.avg_utilization(), 42.0);
    }

    #[test]
    fn busy_cpu_reports_full_load_after_ticks() {
        let mut m = machine(1);
        start(&mut m, SchedClass::Normal, CpuId(0), 1_000_000);
        for k in 1..=100u64 {
            m.queue_mut().advance_clock(SimTime(k * 1000));
            m.on_tick().unwrap();
        }
        assert_eq!(m.cpu_utilization(CpuId(0)), 100.0);
        assert_eq!(m.tasks()[0].usage_pct, 100.0);
        m.check_invariants().unwrap();
    }

    #[test]
    fn normal_timeslice_rotates() {
        let mut m = machine(1);
        let a = start(&mut m, SchedClass::Normal, CpuId(0), 1_000_000);
        let b = start(&mut m, SchedClass::Normal, CpuId(0), 1_000_000);
        for k in 1..=4u64 {
            m.queue_mut().advance_clock(SimTime(k * 1000));
            m.on_tick().unwrap();
        }
        assert_eq!(m.cpu(CpuId(0)).current(), Some(b));
        assert_eq!(m.cpu(CpuId(0)).queued().next(), Some(a));
    }

    #[test]
    fn rejects_degenerate_scripts() {
        assert!(BehaviorScript::single(Dist::Constant(0), Dist::Constant(0)).is_none());
        assert!(BehaviorScript::new(vec![]).is_none());
        assert!(BehaviorScript::single(Dist::uniform(5, 1), Dist::Constant(1)).is_none());
        assert!(BehaviorScript::single(Dist::Constant(0), Dist::Constant(10)).is_some());
    }

    #[test]
    fn dist_json_forms() {
        let c: Dist = serde_json::from_str("250").unwrap();
        assert_eq!(c, Dist::Constant(250));
        let u: Dist = serde_json::from_str(r#"{"uniform": [10, 20]}"#).unwrap();
        assert_eq!(u, Dist::uniform(10, 20));
        assert_eq!(u.mean(), 15.0);
    }
}
