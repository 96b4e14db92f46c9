use thiserror::Error;

use crate::engine::SimTime;
use crate::sched::{CpuId, TaskId};

/// Fatal simulation errors. Any of these means the model broke one of its
/// own conservation or ordering rules; a run that returns one is invalid.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("event scheduled in the past: at={at} while clock={now}")]
    ScheduledInPast { at: SimTime, now: SimTime },

    #[error("task {task} enqueued while already present in a run queue")]
    DoubleEnqueue { task: TaskId },

    #[error("task {task} is not queued on cpu {cpu}")]
    NotQueued { task: TaskId, cpu: CpuId },

    #[error("task {task} is running on cpu {cpu} and cannot be dequeued")]
    DequeueRunning { task: TaskId, cpu: CpuId },

    #[error("task {task} is pinned to cpu {pinned} but was placed on cpu {cpu}")]
    AffinityViolation {
        task: TaskId,
        pinned: CpuId,
        cpu: CpuId,
    },

    #[error("unknown task {0}")]
    UnknownTask(TaskId),

    #[error("unknown cpu {0}")]
    UnknownCpu(CpuId),

    #[error("invariant violated at t={at}: {what}")]
    Invariant { at: SimTime, what: String },
}

/// Scenario loading and validation failures.
#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("scenario parse error at `{key}` (line {line}, column {column}): {msg}")]
    Parse {
        key: String,
        line: usize,
        column: usize,
        msg: String,
    },

    #[error("invalid scenario key `{key}`: {msg}")]
    Invalid { key: String, msg: String },

    #[error("unknown policy `{0}` (expected baseline, zone:cold, zone:warm_low, zone:warm_mid, zone:warm_high or zone:hot)")]
    UnknownPolicy(String),
}

impl ScenarioError {
    pub(crate) fn invalid(key: &str, msg: impl Into<String>) -> Self {
        ScenarioError::Invalid {
            key: key.to_string(),
            msg: msg.into(),
        }
    }
}
