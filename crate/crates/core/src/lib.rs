//! Discrete-event model of an SMP scheduler with two load balancers: the
//! periodic pull balancer and the operation-zone balancer that only acts on
//! task creation, idle wakeup and busiest-CPU ticks once utilization crosses
//! a per-policy threshold.
//!
//! ```
//! use zonebal_core::{Policy, Scenario};
//!
//! let mut s = Scenario::light();
//! s.duration_us = 200_000;
//! s.apply_policy("zone:cold".parse::<Policy>().unwrap());
//! let metrics = s.run().unwrap();
//! assert_eq!(metrics.ledger.migrations, 0);
//! ```

pub mod balance;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod scenario;
pub mod sched;
pub mod trace;
pub mod workload;

pub use balance::{
    BalanceOutcome, Balancer, BaselineBalancer, BaselineConfig, Spot, ZoneBalancer, ZoneConfig,
    ZonePolicy,
};
pub use engine::{EventKind, SimRng, SimTime, Simulator};
pub use error::{ScenarioError, SimError};
pub use metrics::{MetricsStore, RunReport};
pub use scenario::{Policy, Scenario};
pub use sched::{CpuId, Machine, MachineConfig, TaskId};
