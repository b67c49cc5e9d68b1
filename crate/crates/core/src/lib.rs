//! Discrete-event model of memory sharing across hosts attached to one
//! multi-headed CXL Type-3 device.

pub mod addrmap;
pub mod coherence;
pub mod config;
pub mod device;
pub mod driver;
pub mod engine;
pub mod pgas;
pub mod units;
pub mod workload;

pub use addrmap::{PortId, RemapEntry, RemapTable, LINE_BYTES, PAGE_BYTES};
pub use coherence::{FilterMode, HostId, SnoopFilter};
pub use config::{parse_config, ConfigError, SimConfig};
pub use device::{Device, DeviceConfig};
pub use engine::{run, EngineError, EventKind, LatencyModel, Metrics, RunReport, TraceRecord};
pub use workload::{generate_workload, generate_workload_for, Op, Verb, Workload, WorkloadSpec};
