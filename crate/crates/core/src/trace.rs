//! Execution trace. A bounded tail is always kept for diagnostics; the full
//! record is opt-in because long runs produce millions of entries.

use std::collections::VecDeque;

use serde::Serialize;

use crate::engine::{EventKind, SimTime};
use crate::sched::{CpuId, TaskId};

const TAIL_LEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TriggerKind {
    TaskCreated,
    IdleWakeup,
    TickBusiestMember,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum TraceRecord {
    Event {
        at: SimTime,
        seq: u64,
        kind: EventKind,
    },
    Dispatch {
        at: SimTime,
        cpu: CpuId,
        task: TaskId,
    },
    Preempt {
        at: SimTime,
        cpu: CpuId,
        task: TaskId,
    },
    Block {
        at: SimTime,
        cpu: CpuId,
        task: TaskId,
        until: SimTime,
    },
    Exit {
        at: SimTime,
        task: TaskId,
    },
    Trigger {
        at: SimTime,
        kind: TriggerKind,
        gate_open: bool,
    },
    Place {
        at: SimTime,
        task: TaskId,
        cpu: CpuId,
    },
    Migrate {
        at: SimTime,
        src: CpuId,
        dst: CpuId,
        task: TaskId,
    },
    LockWindow {
        cpu: CpuId,
        start: SimTime,
        end: SimTime,
    },
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    full: Option<Vec<TraceRecord>>,
    tail: VecDeque<TraceRecord>,
}

impl Trace {
    pub fn enable_full(&mut self) {
        self.full.get_or_insert_with(Vec::new);
    }

    pub fn record(&mut self, rec: TraceRecord) {
        if self.tail.len() == TAIL_LEN {
            self.tail.pop_front();
        }
        if let Some(full) = self.full.as_mut() {
            full.push(rec.clone());
        }
        self.tail.push_back(rec);
    }

    /// Every record since the run started, if full recording is enabled.
    pub fn full(&self) -> Option<&[TraceRecord]> {
        self.full.as_deref()
    }

    /// The most recent records, oldest first.
    pub fn tail(&self) -> impl Iterator<Item = &TraceRecord> {
        self.tail.iter()
    }
}
