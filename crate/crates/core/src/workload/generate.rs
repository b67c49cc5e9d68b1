use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Op, RegionRef, Verb, Workload, WorkloadError};
use crate::addrmap::{RemapTable, LINE_BYTES};
use crate::driver::{AppId, Permission};
use crate::units;

/// Application id used by generated writers on every host.
const GENERATED_APP: AppId = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum InterArrival {
    Fixed { ns: u64 },
    Uniform { min_ns: u64, max_ns: u64 },
}

impl Default for InterArrival {
    fn default() -> Self {
        InterArrival::Fixed { ns: 100 }
    }
}

impl InterArrival {
    fn sample(&self, rng: &mut ChaCha8Rng) -> u64 {
        match *self {
            InterArrival::Fixed { ns } => ns,
            InterArrival::Uniform { min_ns, max_ns } => rng.gen_range(min_ns..=max_ns),
        }
    }
}

fn default_hot_region_bytes() -> u64 {
    4096
}

fn default_footprint_bytes() -> u64 {
    1 << 20
}

fn default_access_bytes() -> u64 {
    8
}

fn default_hosts() -> usize {
    2
}

fn default_one() -> usize {
    1
}

/// Parameters of a synthetic operation mix.
///
/// Addresses are drawn from `[footprint_base, footprint_base + footprint_bytes)`
/// in device address space. With probability `hot_fraction` the op lands in one
/// of `hot_region_count` hot areas of `hot_region_bytes` each, laid out from the
/// start of the footprint. Every access stays inside one 64-byte line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub num_ops: usize,
    pub read_fraction: f64,
    pub write_fraction: f64,
    pub atomic_fraction: f64,
    #[serde(default = "default_one")]
    pub hot_region_count: usize,
    #[serde(default)]
    pub hot_fraction: f64,
    #[serde(with = "units::flex", default = "default_hot_region_bytes")]
    pub hot_region_bytes: u64,
    #[serde(with = "units::hex_addr", default)]
    pub footprint_base: u64,
    #[serde(with = "units::flex", default = "default_footprint_bytes")]
    pub footprint_bytes: u64,
    #[serde(with = "units::flex", default = "default_access_bytes")]
    pub access_bytes: u64,
    #[serde(default)]
    pub inter_arrival: InterArrival,
    #[serde(default = "default_hosts")]
    pub num_hosts: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            num_ops: 0,
            read_fraction: 1.0,
            write_fraction: 0.0,
            atomic_fraction: 0.0,
            hot_region_count: 1,
            hot_fraction: 0.0,
            hot_region_bytes: default_hot_region_bytes(),
            footprint_base: 0,
            footprint_bytes: default_footprint_bytes(),
            access_bytes: default_access_bytes(),
            inter_arrival: InterArrival::default(),
            num_hosts: default_hosts(),
            seed: None,
        }
    }
}

impl WorkloadSpec {
    /// Parses and validates a spec written as TOML.
    pub fn from_toml_str(text: &str) -> Result<Self, WorkloadError> {
        let spec: WorkloadSpec = toml::from_str(text)
            .map_err(|e| WorkloadError::InvalidSpec(e.message().to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Returns every problem found, each as `(field, reason)`.
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        for (name, v) in [
            ("read_fraction", self.read_fraction),
            ("write_fraction", self.write_fraction),
            ("atomic_fraction", self.atomic_fraction),
            ("hot_fraction", self.hot_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                out.push((name, format!("must lie in [0, 1], got {v}")));
            }
        }
        let sum = self.read_fraction + self.write_fraction + self.atomic_fraction;
        if (sum - 1.0).abs() > 1e-9 {
            out.push((
                "fractions",
                format!("read + write + atomic fractions must sum to 1, got {sum}"),
            ));
        }
        if self.hot_region_count == 0 {
            out.push(("hot_region_count", "must be at least 1".into()));
        }
        if self.num_hosts == 0 {
            out.push(("num_hosts", "must be at least 1".into()));
        }
        if self.access_bytes == 0 || self.access_bytes > LINE_BYTES {
            out.push(("access_bytes", format!("must lie in 1..={LINE_BYTES}")));
        }
        if self.footprint_bytes < LINE_BYTES || !self.footprint_bytes.is_multiple_of(LINE_BYTES) {
            out.push((
                "footprint_bytes",
                format!("must be a positive multiple of {LINE_BYTES}"),
            ));
        }
        if !self.footprint_base.is_multiple_of(LINE_BYTES) {
            out.push((
                "footprint_base",
                format!("must be {LINE_BYTES}-byte aligned"),
            ));
        }
        if self.hot_region_bytes < LINE_BYTES || !self.hot_region_bytes.is_multiple_of(LINE_BYTES) {
            out.push((
                "hot_region_bytes",
                format!("must be a positive multiple of {LINE_BYTES}"),
            ));
        } else if (self.hot_region_count as u64).saturating_mul(self.hot_region_bytes)
            > self.footprint_bytes
        {
            out.push((
                "hot_region_count",
                "hot regions do not fit inside the footprint".into(),
            ));
        }
        if let InterArrival::Uniform { min_ns, max_ns } = self.inter_arrival {
            if min_ns > max_ns {
                out.push(("inter_arrival", "min_ns exceeds max_ns".into()));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let problems = self.problems();
        if problems.is_empty() {
            return Ok(());
        }
        let text = problems
            .iter()
            .map(|(f, r)| format!("{f}: {r}"))
            .collect::<Vec<_>>()
            .join("; ");
        Err(WorkloadError::InvalidSpec(text))
    }
}

enum Kind {
    Read,
    Write,
    Atomic,
}

/// Generates with identity host addresses, seeded from `spec.seed` (or 0).
pub fn generate_workload(spec: &WorkloadSpec) -> Result<Workload, WorkloadError> {
    generate_workload_for(spec, spec.seed.unwrap_or(0), &[])
}

/// Generates a trace whose addresses are translated through each host's
/// remap table. Hosts without a table use identity addresses.
///
/// Writes are emitted as `map`, `acquire`, `write`, `release`, all naming the
/// target by address, so the same trace is valid for any lock region size.
pub fn generate_workload_for(
    spec: &WorkloadSpec,
    seed: u64,
    tables: &[RemapTable],
) -> Result<Workload, WorkloadError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ops = Vec::new();
    if spec.num_ops == 0 {
        return Ok(Workload::new(ops));
    }

    if spec.write_fraction > 0.0 {
        for host in 0..spec.num_hosts {
            ops.push(Op::new(0, host, Verb::Register { app: GENERATED_APP }));
        }
    }

    let to_host = |host: usize, dpa: u64| -> Result<u64, WorkloadError> {
        match tables.get(host) {
            Some(t) => t
                .dpa_to_hpa(dpa)
                .map_err(|e| WorkloadError::InvalidSpec(format!("host {host}: {e}"))),
            None => Ok(dpa),
        }
    };

    let mut time = 0u64;
    for _ in 0..spec.num_ops {
        let host = rng.gen_range(0..spec.num_hosts);
        let roll: f64 = rng.gen();
        let kind = if roll < spec.read_fraction {
            Kind::Read
        } else if roll < spec.read_fraction + spec.write_fraction {
            Kind::Write
        } else {
            Kind::Atomic
        };
        // A zero-probability class can still be hit by rounding at the top end.
        let kind = match kind {
            Kind::Atomic if spec.atomic_fraction == 0.0 => {
                if spec.write_fraction > 0.0 {
                    Kind::Write
                } else {
                    Kind::Read
                }
            }
            k => k,
        };

        let (area_base, area_len) = if rng.gen::<f64>() < spec.hot_fraction {
            let h = rng.gen_range(0..spec.hot_region_count) as u64;
            (
                spec.footprint_base + h * spec.hot_region_bytes,
                spec.hot_region_bytes,
            )
        } else {
            (spec.footprint_base, spec.footprint_bytes)
        };
        let line = area_base + rng.gen_range(0..area_len / LINE_BYTES) * LINE_BYTES;

        match kind {
            Kind::Read => {
                let off = rng.gen_range(0..=LINE_BYTES - spec.access_bytes);
                ops.push(Op::new(
                    time,
                    host,
                    Verb::Read {
                        addr: to_host(host, line + off)?,
                        len: spec.access_bytes,
                    },
                ));
            }
            Kind::Write => {
                let off = rng.gen_range(0..=LINE_BYTES - spec.access_bytes);
                let addr = to_host(host, line + off)?;
                let data: Vec<u8> = (0..spec.access_bytes).map(|_| rng.gen()).collect();
                let target = RegionRef::Addr(addr);
                let app = GENERATED_APP;
                ops.push(Op::new(
                    time,
                    host,
                    Verb::Map {
                        app,
                        target,
                        perm: Permission::ReadWrite,
                    },
                ));
                ops.push(Op::new(time, host, Verb::Acquire { app, target }));
                ops.push(Op::new(time, host, Verb::Write { addr, data }));
                ops.push(Op::new(time, host, Verb::Release { app, target }));
            }
            Kind::Atomic => {
                let word = rng.gen_range(0..LINE_BYTES / 8) * 8;
                ops.push(Op::new(
                    time,
                    host,
                    Verb::Amo {
                        addr: to_host(host, line + word)?,
                        expected: rng.gen_range(0..4),
                        new: rng.gen_range(0..4),
                    },
                ));
            }
        }
        time += spec.inter_arrival.sample(&mut rng);
    }
    Ok(Workload::new(ops))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addrmap::RemapEntry;
    use proptest::prelude::*;

    fn mixed(num_ops: usize) -> WorkloadSpec {
        WorkloadSpec {
            num_ops,
            read_fraction: 0.6,
            write_fraction: 0.3,
            atomic_fraction: 0.1,
            hot_region_count: 2,
            hot_fraction: 0.5,
            num_hosts: 4,
            inter_arrival: InterArrival::Uniform {
                min_ns: 0,
                max_ns: 50,
            },
            seed: Some(7),
            ..WorkloadSpec::default()
        }
    }

    #[test]
    fn zero_ops_is_empty() {
        let w = generate_workload(&mixed(0)).unwrap();
        assert!(w.is_empty());
    }

    #[test]
    fn read_only_mix_has_no_acquires() {
        let spec = WorkloadSpec {
            num_ops: 500,
            num_hosts: 3,
            ..WorkloadSpec::default()
        };
        let w = generate_workload(&spec).unwrap();
        assert_eq!(w.len(), 500);
        assert!(w.ops.iter().all(|o| matches!(o.verb, Verb::Read { .. })));
    }

    #[test]
    fn same_seed_same_trace() {
        let a = generate_workload(&mixed(300)).unwrap();
        let b = generate_workload(&mixed(300)).unwrap();
        assert_eq!(a.to_string(), b.to_string());
        let c = generate_workload_for(&mixed(300), 8, &[]).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bad_fractions_rejected() {
        let spec = WorkloadSpec {
            read_fraction: 0.7,
            write_fraction: 0.5,
            ..mixed(10)
        };
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("fractions"), "{err}");
        let spec = WorkloadSpec {
            hot_region_count: 0,
            ..mixed(10)
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn addresses_go_through_tables() {
        let t0 = RemapTable::build(0, [RemapEntry::new(0x1000_0000, 0, 1 << 20)]).unwrap();
        let spec = WorkloadSpec {
            num_hosts: 1,
            ..mixed(100)
        };
        let w = generate_workload_for(&spec, 1, &[t0]).unwrap();
        for op in &w.ops {
            if let Verb::Read { addr, .. } | Verb::Write { addr, .. } | Verb::Amo { addr, .. } =
                op.verb
            {
                assert!((0x1000_0000..0x1010_0000).contains(&addr));
            }
        }
    }

    proptest! {
        #[test]
        fn generated_traces_are_well_formed(seed in any::<u64>(), n in 0usize..200) {
            let w = generate_workload_for(&mixed(n), seed, &[]).unwrap();
            prop_assert!(w.check_sorted().is_ok());
            prop_assert_eq!(Workload::parse(&w.to_string()).unwrap(), w.clone());
            // every write sits between an acquire and a release of the same address
            for (i, op) in w.ops.iter().enumerate() {
                if let Verb::Write { addr, data } = &op.verb {
                    prop_assert!(addr % LINE_BYTES + data.len() as u64 <= LINE_BYTES);
                    let target = RegionRef::Addr(*addr);
                    prop_assert_eq!(&w.ops[i - 1].verb, &Verb::Acquire { app: GENERATED_APP, target });
                    prop_assert_eq!(&w.ops[i + 1].verb, &Verb::Release { app: GENERATED_APP, target });
                    prop_assert_eq!(w.ops[i - 1].host, op.host);
                    prop_assert_eq!(w.ops[i + 1].host, op.host);
                }
            }
        }
    }
}
