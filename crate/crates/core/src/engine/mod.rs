//! Discrete-event core: clock, ordered event queue, latency model and the
//! run loop binding hosts, device, snoop filter, drivers and PGAS together.

mod event;
pub mod interleave;
mod latency;
mod metrics;
mod sim;
mod trace;

use std::fmt;

use thiserror::Error;

pub use event::{EventQueue, Scheduled};
pub use latency::{LatencyModel, CXL_EXTRA_BAND};
pub use metrics::{percentile, HostCounts, MetricValue, Metrics};
pub use sim::{run, Access, Deadlock, RunReport, Stuck, StuckHost};
pub use trace::{TraceRecord, TRACE_COLUMNS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    HostRead,
    HostWrite,
    AtomicOp,
    BiSnoopDeliver,
    GrantDeliver,
    Barrier,
    Fence,
    AppArrive,
    AppDepart,
    /// PGAS `init` and `alloc`.
    Collective,
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::HostRead => "HostRead",
            EventKind::HostWrite => "HostWrite",
            EventKind::AtomicOp => "AtomicOp",
            EventKind::BiSnoopDeliver => "BiSnoopDeliver",
            EventKind::GrantDeliver => "GrantDeliver",
            EventKind::Barrier => "Barrier",
            EventKind::Fence => "Fence",
            EventKind::AppArrive => "AppArrive",
            EventKind::AppDepart => "AppDepart",
            EventKind::Collective => "Collective",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("event at t={time} scheduled behind the clock at t={clock}")]
    TimeTravel { time: u64, clock: u64 },

    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),

    #[error(transparent)]
    Workload(#[from] crate::workload::WorkloadError),

    #[error("operation {index} names host {host}, but only {hosts} hosts exist")]
    HostOutOfRange {
        index: usize,
        host: usize,
        hosts: usize,
    },

    #[error("cannot build the simulated system: {0}")]
    Setup(String),

    #[error("{0}")]
    Deadlock(Box<Deadlock>),
}
