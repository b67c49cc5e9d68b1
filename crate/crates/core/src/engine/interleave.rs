//! Exhaustive interleaving of per-port lock-word atomics.
//!
//! Every merge of the per-port programs is executed against a fresh device,
//! and each outcome can be checked against a sequential execution of a
//! separate abstract word model.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use super::{run, EngineError, EventKind};
use crate::addrmap::{PortId, LINE_BYTES};
use crate::config::SimConfig;
use crate::device::{token, Device, DeviceConfig, DeviceError};
use crate::workload::{Op, Verb, Workload};

/// Largest total program length accepted.
pub const MAX_OPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AtomicOp {
    Tas {
        lock: usize,
    },
    Cas {
        lock: usize,
        expected: u64,
        new: u64,
    },
}

impl AtomicOp {
    /// CAS that takes a free word for `port`.
    pub fn cas_acquire(lock: usize, port: PortId) -> Self {
        AtomicOp::Cas {
            lock,
            expected: 0,
            new: token(port),
        }
    }

    /// CAS that frees a word held by `port`.
    pub fn cas_release(lock: usize, port: PortId) -> Self {
        AtomicOp::Cas {
            lock,
            expected: token(port),
            new: 0,
        }
    }

    pub fn lock(&self) -> usize {
        match *self {
            AtomicOp::Tas { lock } | AtomicOp::Cas { lock, .. } => lock,
        }
    }
}

impl fmt::Display for AtomicOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AtomicOp::Tas { lock } => write!(f, "TAS({lock})"),
            AtomicOp::Cas {
                lock,
                expected,
                new,
            } => write!(f, "CAS({lock}: {expected}->{new})"),
        }
    }
}

/// Return values per port (in program order) and the final lock words.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Outcome {
    pub returns: Vec<Vec<u64>>,
    pub final_words: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InterleaveError {
    #[error("{total} operations exceed the limit of {max}")]
    TooManyOps { total: usize, max: usize },

    #[error("device rejected an operation: {0}")]
    Device(#[from] DeviceError),

    #[error("engine run failed: {0}")]
    Engine(String),
}

/// A merge order: the port issuing each successive step.
pub type Schedule = Vec<PortId>;

/// Every merge of the per-port sequences, in lexicographic order.
pub fn merges(lengths: &[usize]) -> Vec<Schedule> {
    fn go(remaining: &mut [usize], prefix: &mut Schedule, out: &mut Vec<Schedule>) {
        if remaining.iter().all(|&r| r == 0) {
            out.push(prefix.clone());
            return;
        }
        for p in 0..remaining.len() {
            if remaining[p] > 0 {
                remaining[p] -= 1;
                prefix.push(p);
                go(remaining, prefix, out);
                prefix.pop();
                remaining[p] += 1;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut lengths.to_vec(), &mut Vec::new(), &mut out);
    out
}

fn num_locks(programs: &[Vec<AtomicOp>]) -> usize {
    programs
        .iter()
        .flatten()
        .map(|op| op.lock() + 1)
        .max()
        .unwrap_or(1)
}

/// Runs one merge through the device atomics.
pub fn execute_schedule(
    programs: &[Vec<AtomicOp>],
    schedule: &[PortId],
) -> Result<Outcome, InterleaveError> {
    let locks = num_locks(programs);
    let config = DeviceConfig::new(programs.len().max(2), LINE_BYTES * locks as u64, LINE_BYTES)
        .expect("small device config is valid");
    let mut device = Device::with_identity_ports(config);
    let mut cursor = vec![0usize; programs.len()];
    let mut returns: Vec<Vec<u64>> = programs
        .iter()
        .map(|p| Vec::with_capacity(p.len()))
        .collect();
    for &port in schedule {
        let op = programs[port][cursor[port]];
        cursor[port] += 1;
        let prior = match op {
            AtomicOp::Tas { lock } => device.mmio_test_and_set(port, lock)?,
            AtomicOp::Cas {
                lock,
                expected,
                new,
            } => {
                device
                    .mmio_compare_and_swap(port, lock, expected, new)?
                    .prior
            }
        };
        returns[port].push(prior);
    }
    Ok(Outcome {
        returns,
        final_words: device.locks().words()[..locks].to_vec(),
    })
}

/// Distinct outcomes over every merge of `programs`.
pub fn enumerate_interleavings(
    programs: &[Vec<AtomicOp>],
) -> Result<BTreeSet<Outcome>, InterleaveError> {
    let total: usize = programs.iter().map(Vec::len).sum();
    if total > MAX_OPS {
        return Err(InterleaveError::TooManyOps {
            total,
            max: MAX_OPS,
        });
    }
    let lengths: Vec<usize> = programs.iter().map(Vec::len).collect();
    merges(&lengths)
        .iter()
        .map(|s| execute_schedule(programs, s))
        .collect()
}

/// Reference semantics on plain integers, independent of the device.
fn abstract_step(words: &mut [u64], port: PortId, op: AtomicOp) -> u64 {
    match op {
        AtomicOp::Tas { lock } => {
            let prior = words[lock];
            if prior == 0 {
                words[lock] = port as u64 + 1;
            }
            prior
        }
        AtomicOp::Cas {
            lock,
            expected,
            new,
        } => {
            let prior = words[lock];
            if prior == expected {
                words[lock] = new;
            }
            prior
        }
    }
}

/// Finds a sequential order of the programs' operations, run on the
/// abstract model, that reproduces `outcome` exactly.
pub fn sequential_witness(programs: &[Vec<AtomicOp>], outcome: &Outcome) -> Option<Schedule> {
    let lengths: Vec<usize> = programs.iter().map(Vec::len).collect();
    let locks = outcome.final_words.len();
    merges(&lengths).into_iter().find(|schedule| {
        let mut words = vec![0u64; locks];
        let mut cursor = vec![0usize; programs.len()];
        for &port in schedule {
            let op = programs[port][cursor[port]];
            if abstract_step(&mut words, port, op) != outcome.returns[port][cursor[port]] {
                return false;
            }
            cursor[port] += 1;
        }
        words == outcome.final_words
    })
}

/// The four-letter alphabet used by the exhaustive check for `port`.
pub fn alphabet(port: PortId) -> [AtomicOp; 4] {
    [
        AtomicOp::Tas { lock: 0 },
        AtomicOp::cas_acquire(0, port),
        AtomicOp::cas_release(0, port),
        AtomicOp::Tas { lock: 1 },
    ]
}

/// Every program of length `0..=max_len` over `alphabet(port)`.
pub fn programs_up_to(port: PortId, max_len: usize) -> Vec<Vec<AtomicOp>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for op in alphabet(port) {
                let mut q: Vec<AtomicOp> = p.clone();
                q.push(op);
                next.push(q);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Runs the programs as `mmio-tas` / `mmio-cas` operations through the full
/// simulator, port `p` starting at `start_times[p]`.
pub fn run_through_engine(
    programs: &[Vec<AtomicOp>],
    start_times: &[u64],
) -> Result<Outcome, EngineError> {
    let locks = num_locks(programs);
    let mut config = SimConfig::minimal(
        LINE_BYTES * locks as u64,
        programs.len().max(2),
        programs.len(),
    );
    config.device.lock_region_bytes = LINE_BYTES;
    let mut ops: Vec<Op> = programs
        .iter()
        .enumerate()
        .flat_map(|(port, prog)| {
            prog.iter().map(move |op| {
                let verb = match *op {
                    AtomicOp::Tas { lock } => Verb::MmioTas { lock },
                    AtomicOp::Cas {
                        lock,
                        expected,
                        new,
                    } => Verb::MmioCas {
                        lock,
                        expected,
                        new,
                    },
                };
                Op::new(start_times[port], port, verb)
            })
        })
        .collect();
    ops.sort_by_key(|o| o.time);
    let report = run(&config, &Workload::new(ops))?;
    let mut returns: Vec<Vec<u64>> = vec![Vec::new(); programs.len()];
    for rec in report
        .trace
        .iter()
        .filter(|r| r.kind == EventKind::AtomicOp)
    {
        let prior = rec
            .extra
            .split(';')
            .find_map(|kv| kv.strip_prefix("prior="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| {
                EngineError::Setup(format!("unexpected atomic record {:?}", rec.extra))
            })?;
        returns[rec.host.expect("host op")].push(prior);
    }
    Ok(Outcome {
        returns,
        final_words: report.device.locks().words()[..locks].to_vec(),
    })
}

/// Start offsets tried for the second port when running through the engine.
const ENGINE_OFFSETS: [u64; 7] = [0, 50, 100, 200, 300, 400, 600];

/// Summary of the exhaustive two-port check.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CheckSummary {
    pub program_pairs: usize,
    pub interleavings: usize,
    pub outcomes: usize,
    pub outcomes_with_witness: usize,
    pub tas_races: usize,
    pub tas_races_single_winner: usize,
    pub engine_runs: usize,
    pub engine_runs_enumerated: usize,
    pub failures: Vec<String>,
}

impl CheckSummary {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
            && self.outcomes == self.outcomes_with_witness
            && self.tas_races == self.tas_races_single_winner
            && self.engine_runs == self.engine_runs_enumerated
    }
}

/// Checks every pair of two-port programs up to `max_len` ops each.
///
/// For programs made only of TAS, every outcome must have exactly one
/// observer of 0 per word touched.
pub fn check_two_ports(max_len: usize) -> Result<CheckSummary, InterleaveError> {
    let mut s = CheckSummary::default();
    let p0 = programs_up_to(0, max_len);
    let p1 = programs_up_to(1, max_len);
    for a in &p0 {
        for b in &p1 {
            let programs = vec![a.clone(), b.clone()];
            s.program_pairs += 1;
            s.interleavings += merges(&[a.len(), b.len()]).len();
            let outcomes = enumerate_interleavings(&programs)?;
            let tas_only = programs
                .iter()
                .flatten()
                .all(|op| matches!(op, AtomicOp::Tas { .. }));
            for o in &outcomes {
                s.outcomes += 1;
                if sequential_witness(&programs, o).is_some() {
                    s.outcomes_with_witness += 1;
                } else {
                    s.failures
                        .push(format!("{programs:?}: no witness for {o:?}"));
                }
                if tas_only && !a.is_empty() && !b.is_empty() {
                    s.tas_races += 1;
                    let locks: BTreeSet<usize> =
                        programs.iter().flatten().map(|op| op.lock()).collect();
                    let single = locks.iter().all(|&lock| {
                        let zeros = programs
                            .iter()
                            .zip(&o.returns)
                            .flat_map(|(prog, rets)| prog.iter().zip(rets))
                            .filter(|(op, r)| op.lock() == lock && **r == 0)
                            .count();
                        zeros == 1
                    });
                    if single {
                        s.tas_races_single_winner += 1;
                    } else {
                        s.failures.push(format!(
                            "{programs:?}: TAS race without a single winner: {o:?}"
                        ));
                    }
                }
            }
            for offset in ENGINE_OFFSETS {
                for starts in [[0, offset], [offset, 0]] {
                    s.engine_runs += 1;
                    let got = run_through_engine(&programs, &starts)
                        .map_err(|e| InterleaveError::Engine(e.to_string()))?;
                    if outcomes.contains(&got) {
                        s.engine_runs_enumerated += 1;
                    } else {
                        s.failures.push(format!(
                            "{programs:?}: engine outcome {got:?} not enumerated"
                        ));
                    }
                }
            }
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_port_tas_race() {
        let programs = vec![
            vec![AtomicOp::Tas { lock: 0 }],
            vec![AtomicOp::Tas { lock: 0 }],
        ];
        let outcomes = enumerate_interleavings(&programs).unwrap();
        let expected: BTreeSet<Outcome> = [
            Outcome {
                returns: vec![vec![0], vec![1]],
                final_words: vec![1],
            },
            Outcome {
                returns: vec![vec![2], vec![0]],
                final_words: vec![2],
            },
        ]
        .into();
        assert_eq!(outcomes, expected);
    }

    #[test]
    fn single_tas_single_outcome() {
        let outcomes = enumerate_interleavings(&[vec![AtomicOp::Tas { lock: 0 }]]).unwrap();
        assert_eq!(outcomes.len(), 1);
    }

    #[test]
    fn sequential_cas_pair() {
        let programs = vec![vec![
            AtomicOp::Cas {
                lock: 0,
                expected: 0,
                new: 1,
            },
            AtomicOp::Cas {
                lock: 0,
                expected: 1,
                new: 0,
            },
        ]];
        let outcomes = enumerate_interleavings(&programs).unwrap();
        assert_eq!(
            outcomes.into_iter().collect::<Vec<_>>(),
            vec![Outcome {
                returns: vec![vec![0, 1]],
                final_words: vec![0],
            }]
        );
    }

    #[test]
    fn too_many_ops() {
        let programs = vec![
            vec![AtomicOp::Tas { lock: 0 }; 5],
            vec![AtomicOp::Tas { lock: 0 }; 4],
        ];
        assert_eq!(
            enumerate_interleavings(&programs),
            Err(InterleaveError::TooManyOps { total: 9, max: 8 })
        );
    }

    #[test]
    fn engine_race_matches_enumeration() {
        let programs = vec![
            vec![AtomicOp::Tas { lock: 0 }],
            vec![AtomicOp::Tas { lock: 0 }],
        ];
        let all = enumerate_interleavings(&programs).unwrap();
        let early0 = run_through_engine(&programs, &[0, 10]).unwrap();
        let early1 = run_through_engine(&programs, &[10, 0]).unwrap();
        assert!(all.contains(&early0) && all.contains(&early1));
        assert_ne!(early0, early1);
        assert_eq!(early0.returns, vec![vec![0], vec![1]]);
    }

    #[test]
    fn merge_counts_are_binomial() {
        assert_eq!(merges(&[3, 3]).len(), 20);
        assert_eq!(merges(&[2, 1]).len(), 3);
        assert_eq!(merges(&[0, 0]).len(), 1);
    }

    #[test]
    fn witness_rejects_impossible_outcome() {
        let programs = vec![
            vec![AtomicOp::Tas { lock: 0 }],
            vec![AtomicOp::Tas { lock: 0 }],
        ];
        let both_win = Outcome {
            returns: vec![vec![0], vec![0]],
            final_words: vec![1],
        };
        assert!(sequential_witness(&programs, &both_win).is_none());
    }

    #[test]
    fn small_exhaustive_check_passes() {
        let s = check_two_ports(2).unwrap();
        assert!(s.passed(), "{:?}", s.failures);
        assert_eq!(s.program_pairs, 21 * 21);
        assert_eq!(s.engine_runs, 21 * 21 * 14);
    }
}
