//! Discrete-event core: virtual clock, totally ordered event queue, seeded
//! randomness and the run loop that hands events to the scheduler and the
//! active balancer.
//!
//! Everything here is single-threaded. Two runs built from the same
//! scenario, seed and policy dispatch the same events in the same order.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, AddAssign};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::balance::Balancer;
use crate::error::SimError;
use crate::metrics::MetricsStore;
use crate::sched::{CpuId, Machine, MachineConfig, TaskId, TaskSpec};
use crate::trace::TraceRecord;

/// Simulated time in integer microseconds since the start of the run.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn as_us(self) -> u64 {
        self.0
    }

    /// Microseconds elapsed since `earlier`, zero if `earlier` is later.
    pub fn since(self, earlier: SimTime) -> u64 {
        self.0.saturating_sub(earlier.0)
    }
}

impl Add<u64> for SimTime {
    type Output = SimTime;

    fn add(self, us: u64) -> SimTime {
        SimTime(self.0 + us)
    }
}

impl AddAssign<u64> for SimTime {
    fn add_assign(&mut self, us: u64) {
        self.0 += us;
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum EventKind {
    Tick,
    TaskWakeup(TaskId),
    /// `token` identifies the dispatch that armed this event; a preempted
    /// dispatch leaves a stale event behind that is ignored on arrival.
    BurstEnd {
        cpu: CpuId,
        token: u64,
    },
    TaskCreate(TaskId),
    LockRelease(CpuId),
    SimEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Event {
    pub at: SimTime,
    pub seq: u64,
    pub kind: EventKind,
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Min-heap of pending events keyed by `(at, seq)`.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Reverse<Event>>,
    next_seq: u64,
    now: SimTime,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn schedule(&mut self, at: SimTime, kind: EventKind) -> Result<u64, SimError> {
        if at < self.now {
            return Err(SimError::ScheduledInPast { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Event { at, seq, kind }));
        Ok(seq)
    }

    pub fn peek(&self) -> Option<&Event> {
        self.heap.peek().map(|Reverse(e)| e)
    }

    /// Removes the earliest event and advances the clock to its timestamp.
    pub fn pop(&mut self) -> Option<Event> {
        let Reverse(event) = self.heap.pop()?;
        debug_assert!(event.at >= self.now);
        self.now = event.at;
        Some(event)
    }

    /// Moves the clock forward without dispatching anything.
    pub fn advance_clock(&mut self, to: SimTime) {
        if to > self.now {
            self.now = to;
        }
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// Seeded generator used for every random draw in a run.
///
/// Backed by ChaCha8 with a 64-bit seed expanded by `seed_from_u64`; the
/// `stream` selects an independent keystream so workload generation and the
/// running simulation never share draws.
#[derive(Debug, Clone)]
pub struct SimRng {
    inner: ChaCha8Rng,
}

impl SimRng {
    pub const SIM_STREAM: u64 = 0;
    pub const WORKLOAD_STREAM: u64 = 1;

    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, Self::SIM_STREAM)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    /// Uniform integer in `[min, max]`.
    pub fn range_inclusive(&mut self, min: u64, max: u64) -> u64 {
        if min >= max {
            return min;
        }
        self.inner.random_range(min..=max)
    }

    /// Uniform float in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.inner.random::<f64>()
    }
}

/// Owns the machine, the active balancer and the run loop.
pub struct Simulator {
    machine: Machine,
    balancer: Balancer,
    check_invariants: bool,
    dispatched: u64,
}

impl Simulator {
    /// Builds an empty machine and seeds the first periodic tick.
    pub fn new(config: MachineConfig, balancer: Balancer, seed: u64) -> Self {
        let mut machine = Machine::new(config, SimRng::new(seed));
        let first_tick = SimTime(machine.config().tick_us);
        machine
            .schedule(first_tick, EventKind::Tick)
            .expect("first tick lies in the future");
        Self {
            machine,
            balancer,
            check_invariants: false,
            dispatched: 0,
        }
    }

    /// Re-checks every scheduler invariant after each dispatched event.
    pub fn with_invariant_checks(mut self, enabled: bool) -> Self {
        self.check_invariants = enabled;
        self
    }

    pub fn add_task(&mut self, spec: TaskSpec) -> Result<TaskId, SimError> {
        self.machine.add_task(spec)
    }

    pub fn machine(&self) -> &Machine {
        &self.machine
    }

    pub fn machine_mut(&mut self) -> &mut Machine {
        &mut self.machine
    }

    pub fn balancer(&self) -> &Balancer {
        &self.balancer
    }

    pub fn balancer_mut(&mut self) -> &mut Balancer {
        &mut self.balancer
    }

    /// Simultaneous mutable access, for driving balancer operations by hand.
    pub fn parts_mut(&mut self) -> (&mut Machine, &mut Balancer) {
        (&mut self.machine, &mut self.balancer)
    }

    pub fn now(&self) -> SimTime {
        self.machine.now()
    }

    pub fn events_dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn next_event_time(&self) -> Option<SimTime> {
        self.machine.queue().peek().map(|e| e.at)
    }

    pub fn peek_event(&self) -> Option<&Event> {
        self.machine.queue().peek()
    }

    /// Dispatches the earliest pending event. Returns `None` when the queue
    /// is empty.
    pub fn step(&mut self) -> Result<Option<Event>, SimError> {
        let Some(event) = self.machine.queue_mut().pop() else {
            return Ok(None);
        };
        self.dispatch(event)?;
        Ok(Some(event))
    }

    /// Dispatches every event with `at <= until`, then parks the clock at
    /// `until`.
    pub fn advance_to(&mut self, until: SimTime) -> Result<(), SimError> {
        while self.next_event_time().is_some_and(|at| at <= until) {
            self.step()?;
        }
        self.machine.queue_mut().advance_clock(until);
        Ok(())
    }

    /// Runs to `end`, emits `SimEnd` and hands back the collected metrics.
    /// An empty queue before `end` is a clean early finish.
    pub fn run_until(&mut self, end: SimTime) -> Result<MetricsStore, SimError> {
        self.advance_to(end)?;
        let now = self.machine.now();
        self.machine.schedule(now, EventKind::SimEnd)?;
        // SimEnd is the only event at `now` left in the queue; anything else
        // at this timestamp was drained by advance_to.
        while let Some(event) = self.machine.queue_mut().pop() {
            let done = event.kind == EventKind::SimEnd;
            self.dispatch(event)?;
            if done {
                break;
            }
        }
        Ok(self.machine.take_metrics())
    }

    fn dispatch(&mut self, event: Event) -> Result<(), SimError> {
        self.dispatched += 1;
        self.machine.trace_mut().record(TraceRecord::Event {
            at: event.at,
            seq: event.seq,
            kind: event.kind,
        });
        let m = &mut self.machine;
        match event.kind {
            EventKind::Tick => {
                m.on_tick()?;
                self.balancer.on_tick(m);
                // balancing runs in tick context, ahead of anything else
                // due at the same instant
                for cpu in self.balancer.tick_targets(m) {
                    self.balancer.balance_check(m, cpu)?;
                }
                let next = event.at + m.config().tick_us;
                m.schedule(next, EventKind::Tick)?;
            }
            EventKind::TaskCreate(task) => {
                let cpu = self.balancer.place_new(m, task)?;
                m.start_task(task, cpu)?;
            }
            EventKind::TaskWakeup(task) => {
                if m.expire_if_due(task)? {
                    // exited while blocked
                } else {
                    let cpu = self.balancer.place_wakeup(m, task)?;
                    m.wake_task(task, cpu)?;
                }
            }
            EventKind::BurstEnd { cpu, token } => m.burst_end(cpu, token)?,
            EventKind::LockRelease(cpu) => m.lock_release(cpu)?,
            EventKind::SimEnd => m.finish(),
        }
        if self.check_invariants {
            self.machine.check_invariants()?;
        }
        Ok(())
    }
}
