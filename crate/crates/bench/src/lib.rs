//! Shared fixtures for the benchmarks.

use sharesim_core::workload::InterArrival;
use sharesim_core::{SimConfig, Workload, WorkloadSpec};

/// A contended mixed workload on `hosts` hosts.
pub fn mixed(hosts: usize, ops: usize, seed: u64) -> (SimConfig, Workload) {
    let mut c = SimConfig::minimal(1 << 20, hosts.max(2), hosts);
    c.seed = seed;
    c.workload.generator = Some(WorkloadSpec {
        num_ops: ops,
        read_fraction: 0.45,
        write_fraction: 0.45,
        atomic_fraction: 0.1,
        hot_region_count: 4,
        hot_fraction: 0.6,
        num_hosts: hosts,
        inter_arrival: InterArrival::Uniform {
            min_ns: 0,
            max_ns: 400,
        },
        ..Default::default()
    });
    let w = c.load_workload().expect("generated workload");
    (c, w)
}
