//! Simulation configuration, stored as TOML.
//!
//! ```toml
//! seed = 42
//!
//! [device]
//! hdm_bytes = "64MiB"
//! num_ports = 4
//! lock_region_bytes = 4096
//!
//! [coherence]
//! mode = "hybrid"                          # precise | imprecise | hybrid
//! granularity_bytes = 4096                 # imprecise tracking unit
//! precise_ranges = [["0x0", "0x100000"]]   # [start, end) device addresses
//!
//! [hosts]
//! count = 4
//!
//! [[ports]]
//! id = 1
//! remap = [["0x1_0000_0000", "0x0", "64MiB"]]   # host, device, length
//!
//! [workload]
//! ops = """
//! t=0 host=0 read addr=0x0 len=8
//! """
//! ```
//!
//! Ports without a `[[ports]]` entry see the whole device at identity
//! addresses. Numbers may be written as integers, `0x` strings or sizes
//! such as `"4KiB"`.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addrmap::{RemapEntry, RemapTable, ADDRESS_LIMIT, LINE_BYTES};
use crate::coherence::{DpaRange, FilterMode, DEFAULT_ENTRY_BASE_BYTES};
use crate::device::DeviceConfig;
use crate::engine::LatencyModel;
use crate::pgas::{min_meta_bytes, PgasLayout};
use crate::units::{self, Hex};
use crate::workload::{generate_workload_for, Workload, WorkloadError, WorkloadSpec};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "SHARESIM_SEED";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub path: String,
    pub reason: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.reason)
    }
}

fn join_errors(errors: &[FieldError]) -> String {
    errors
        .iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },

    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid configuration:\n{}", join_errors(.0))]
    Validation(Vec<FieldError>),

    #[error("workload: {0}")]
    Workload(#[from] WorkloadError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Precise,
    Imprecise,
    Hybrid,
}

fn default_lock_region() -> u64 {
    4096
}

fn default_granularity() -> u64 {
    4096
}

fn default_entry_overhead() -> u64 {
    DEFAULT_ENTRY_BASE_BYTES
}

fn default_mode() -> ModeName {
    ModeName::Precise
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSection {
    #[serde(with = "units::flex")]
    pub hdm_bytes: u64,
    pub num_ports: usize,
    #[serde(with = "units::flex", default = "default_lock_region")]
    pub lock_region_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoherenceSection {
    #[serde(default = "default_mode")]
    pub mode: ModeName,
    #[serde(with = "units::flex", default = "default_granularity")]
    pub granularity_bytes: u64,
    /// Hardware-coherent ranges in hybrid mode. Also used for the hybrid
    /// row of a filter comparison when another mode is selected.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub precise_ranges: Vec<[Hex; 2]>,
    /// Fixed bytes per directory entry, before the sharer bitmask.
    #[serde(with = "units::flex", default = "default_entry_overhead")]
    pub entry_overhead_bytes: u64,
    /// Per-host cache capacity in lines; unbounded when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_capacity_lines: Option<usize>,
}

impl Default for CoherenceSection {
    fn default() -> Self {
        Self {
            mode: default_mode(),
            granularity_bytes: default_granularity(),
            precise_ranges: Vec::new(),
            entry_overhead_bytes: default_entry_overhead(),
            cache_capacity_lines: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostsSection {
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortSection {
    pub id: usize,
    /// `[host_base, device_base, length]` triples.
    pub remap: Vec<[Hex; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgasSection {
    #[serde(with = "units::hex_addr")]
    pub heap_base: u64,
    #[serde(with = "units::flex")]
    pub heap_bytes: u64,
    #[serde(with = "units::flex")]
    pub meta_bytes: u64,
}

impl From<PgasSection> for PgasLayout {
    fn from(p: PgasSection) -> Self {
        PgasLayout {
            heap_base: p.heap_base,
            heap_bytes: p.heap_bytes,
            meta_bytes: p.meta_bytes,
        }
    }
}

/// Where the operations come from. At most one source may be given; an
/// empty section means an empty workload.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ops: Option<String>,
    /// Trace file, relative to the config file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<WorkloadSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(with = "units::flex", default)]
    pub seed: u64,
    pub device: DeviceSection,
    #[serde(default)]
    pub coherence: CoherenceSection,
    #[serde(default)]
    pub latency: LatencyModel,
    pub hosts: HostsSection,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ports: Vec<PortSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pgas: Option<PgasSection>,
    #[serde(default)]
    pub workload: WorkloadSection,
    /// Directory that relative workload files are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before
        .rfind('\n')
        .map_or(before.len(), |nl| before.len() - nl - 1)
        + 1;
    (line, column)
}

/// Reads, parses and validates a config file.
pub fn parse_config(path: &Path) -> Result<SimConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut config = SimConfig::from_toml_str(&text)?;
    config.base_dir = path.parent().map(Path::to_path_buf);
    Ok(config)
}

impl SimConfig {
    /// A config with defaults everywhere except the required fields.
    pub fn minimal(hdm_bytes: u64, num_ports: usize, hosts: usize) -> Self {
        Self {
            seed: 0,
            device: DeviceSection {
                hdm_bytes,
                num_ports,
                lock_region_bytes: default_lock_region(),
            },
            coherence: CoherenceSection::default(),
            latency: LatencyModel::default(),
            hosts: HostsSection { count: hosts },
            ports: Vec::new(),
            pgas: None,
            workload: WorkloadSection::default(),
            base_dir: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: SimConfig = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
            ConfigError::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Replaces the seed from `SHARESIM_SEED` when set.
    pub fn apply_seed_env(&mut self) -> Result<(), ConfigError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = units::parse_u64(&v).map_err(|reason| {
                ConfigError::Validation(vec![FieldError {
                    path: SEED_ENV.into(),
                    reason,
                }])
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let errors = self.problems();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Validation(errors))
        }
    }

    /// Every validation problem, not just the first.
    pub fn problems(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        let mut push = |path: String, reason: String| errs.push(FieldError { path, reason });
        let hdm = self.device.hdm_bytes;

        if hdm > ADDRESS_LIMIT {
            push(
                "device.hdm_bytes".into(),
                "exceeds the 52-bit address space".into(),
            );
        }
        if let Err(reason) =
            DeviceConfig::new(self.device.num_ports, hdm, self.device.lock_region_bytes)
        {
            push("device".into(), reason);
        }
        if self.hosts.count == 0 {
            push("hosts.count".into(), "must be at least 1".into());
        }
        if self.hosts.count > self.device.num_ports {
            push(
                "hosts.count".into(),
                format!(
                    "{} hosts but the device has {} ports",
                    self.hosts.count, self.device.num_ports
                ),
            );
        }

        let c = &self.coherence;
        if c.mode == ModeName::Imprecise
            && (!c.granularity_bytes.is_power_of_two() || c.granularity_bytes < LINE_BYTES)
        {
            push(
                "coherence.granularity_bytes".into(),
                format!("must be a power of two >= 64, got {}", c.granularity_bytes),
            );
        }
        if c.mode == ModeName::Hybrid && c.precise_ranges.is_empty() {
            push(
                "coherence.precise_ranges".into(),
                "hybrid mode needs at least one precise range".into(),
            );
        }
        for (i, [Hex(start), Hex(end)]) in c.precise_ranges.iter().enumerate() {
            let path = format!("coherence.precise_ranges[{i}]");
            if start >= end {
                push(path, format!("empty range {start:#x}..{end:#x}"));
            } else if start % LINE_BYTES != 0 || end % LINE_BYTES != 0 {
                push(path, "bounds must be 64-byte aligned".into());
            } else if *end > hdm {
                push(path, format!("ends at {end:#x}, beyond HDM size {hdm:#x}"));
            }
        }
        if c.cache_capacity_lines == Some(0) {
            push(
                "coherence.cache_capacity_lines".into(),
                "must be positive when given".into(),
            );
        }

        for (field, reason) in self.latency.problems() {
            push(format!("latency.{field}"), reason);
        }

        let mut seen = std::collections::BTreeSet::new();
        for (i, p) in self.ports.iter().enumerate() {
            let path = format!("ports[{i}]");
            if p.id >= self.device.num_ports {
                push(
                    format!("{path}.id"),
                    format!(
                        "port {} does not exist on a {}-port device",
                        p.id, self.device.num_ports
                    ),
                );
            }
            if !seen.insert(p.id) {
                push(format!("{path}.id"), format!("port {} listed twice", p.id));
            }
            match Self::build_table(p) {
                Err(e) => push(format!("{path}.remap"), e.to_string()),
                Ok(t) => {
                    if t.device_extent() > hdm {
                        push(
                            format!("{path}.remap"),
                            format!("maps device addresses beyond HDM size {hdm:#x}"),
                        );
                    }
                }
            }
        }

        if let Some(p) = &self.pgas {
            let needed = min_meta_bytes(self.hosts.count);
            if p.meta_bytes < needed {
                push(
                    "pgas.meta_bytes".into(),
                    format!("needs at least {needed} bytes for {} PEs", self.hosts.count),
                );
            }
            if p.heap_bytes <= p.meta_bytes {
                push("pgas.heap_bytes".into(), "must exceed meta_bytes".into());
            }
            if p.heap_base % LINE_BYTES != 0 || p.meta_bytes % LINE_BYTES != 0 {
                push(
                    "pgas".into(),
                    "heap_base and meta_bytes must be 64-byte aligned".into(),
                );
            }
            if p.heap_base
                .checked_add(p.heap_bytes)
                .is_none_or(|e| e > hdm)
            {
                push("pgas.heap_bytes".into(), "heap extends beyond HDM".into());
            }
        }

        let w = &self.workload;
        let sources =
            w.ops.is_some() as usize + w.file.is_some() as usize + w.generator.is_some() as usize;
        if sources > 1 {
            push(
                "workload".into(),
                "give at most one of ops, file, generator".into(),
            );
        }
        if let Some(g) = &w.generator {
            for (field, reason) in g.problems() {
                push(format!("workload.generator.{field}"), reason);
            }
            if g.num_hosts > self.hosts.count {
                push(
                    "workload.generator.num_hosts".into(),
                    format!("exceeds hosts.count = {}", self.hosts.count),
                );
            }
            if g.footprint_base.saturating_add(g.footprint_bytes) > hdm {
                push(
                    "workload.generator.footprint_bytes".into(),
                    "footprint extends beyond HDM".into(),
                );
            }
        }
        if let Some(ops) = &w.ops {
            if let Err(e) = Workload::parse(ops) {
                push("workload.ops".into(), e.to_string());
            }
        }
        errs
    }

    fn build_table(p: &PortSection) -> Result<RemapTable, crate::addrmap::AddrError> {
        RemapTable::build(
            p.id,
            p.remap
                .iter()
                .map(|[h, d, l]| RemapEntry::new(h.0, d.0, l.0)),
        )
    }

    pub fn device_config(&self) -> DeviceConfig {
        DeviceConfig::new(
            self.device.num_ports,
            self.device.hdm_bytes,
            self.device.lock_region_bytes,
        )
        .expect("validated device section")
    }

    /// One table per device port.
    pub fn remap_tables(&self) -> Vec<RemapTable> {
        (0..self.device.num_ports)
            .map(|port| match self.ports.iter().find(|p| p.id == port) {
                Some(p) => Self::build_table(p).expect("validated remap table"),
                None => RemapTable::identity(port, self.device.hdm_bytes).expect("valid HDM size"),
            })
            .collect()
    }

    pub fn filter_mode(&self) -> FilterMode {
        match self.coherence.mode {
            ModeName::Precise => FilterMode::Precise,
            ModeName::Imprecise => FilterMode::Imprecise {
                granularity: self.coherence.granularity_bytes,
            },
            ModeName::Hybrid => FilterMode::Hybrid {
                precise_ranges: self
                    .coherence
                    .precise_ranges
                    .iter()
                    .map(|[s, e]| DpaRange::new(s.0, e.0))
                    .collect(),
            },
        }
    }

    /// Switches the snoop filter mode, keeping the other settings.
    pub fn with_mode(&self, mode: &FilterMode) -> Self {
        let mut c = self.clone();
        match mode {
            FilterMode::Precise => c.coherence.mode = ModeName::Precise,
            FilterMode::Imprecise { granularity } => {
                c.coherence.mode = ModeName::Imprecise;
                c.coherence.granularity_bytes = *granularity;
            }
            FilterMode::Hybrid { precise_ranges } => {
                c.coherence.mode = ModeName::Hybrid;
                c.coherence.precise_ranges = precise_ranges
                    .iter()
                    .map(|r| [Hex(r.start), Hex(r.end)])
                    .collect();
            }
        }
        c
    }

    pub fn pgas_layout(&self) -> Option<PgasLayout> {
        self.pgas.map(PgasLayout::from)
    }

    /// Materialises the configured workload. Generated traces use
    /// `generator.seed` when given, the config seed otherwise.
    pub fn load_workload(&self) -> Result<Workload, ConfigError> {
        let w = &self.workload;
        if let Some(ops) = &w.ops {
            return Ok(Workload::parse(ops)?);
        }
        if let Some(file) = &w.file {
            let path = match &self.base_dir {
                Some(dir) if file.is_relative() => dir.join(file),
                _ => file.clone(),
            };
            let text = std::fs::read_to_string(&path).map_err(|e| ConfigError::Io {
                path: path.clone(),
                message: e.to_string(),
            })?;
            return Ok(Workload::parse(&text)?);
        }
        if let Some(spec) = &w.generator {
            let seed = spec.seed.unwrap_or(self.seed);
            return Ok(generate_workload_for(spec, seed, &self.remap_tables())?);
        }
        Ok(Workload::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MINIMAL: &str = r#"
[device]
hdm_bytes = "16MiB"
num_ports = 2

[hosts]
count = 2
"#;

    #[test]
    fn minimal_file_gets_defaults() {
        let c = SimConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(c.device.hdm_bytes, 16 << 20);
        assert_eq!(c.device.lock_region_bytes, 4096);
        assert_eq!(c.coherence.mode, ModeName::Precise);
        assert_eq!(c.latency, LatencyModel::default());
        assert_eq!(c.seed, 0);
        assert!(c.load_workload().unwrap().is_empty());
        let tables = c.remap_tables();
        assert_eq!(tables.len(), 2);
        assert_eq!(tables[1].hpa_to_dpa(0x40).unwrap(), 0x40);
    }

    #[test]
    fn hybrid_without_ranges_rejected() {
        let text = format!("{MINIMAL}\n[coherence]\nmode = \"hybrid\"\n");
        match SimConfig::from_toml_str(&text) {
            Err(ConfigError::Validation(errs)) => {
                assert_eq!(errs.len(), 1);
                assert_eq!(errs[0].path, "coherence.precise_ranges");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_fractions_name_the_section() {
        let text = format!(
            "{MINIMAL}\n[workload.generator]\nnum_ops = 10\nread_fraction = 0.5\nwrite_fraction = 0.5\natomic_fraction = 0.2\n"
        );
        let err = SimConfig::from_toml_str(&text).unwrap_err();
        let ConfigError::Validation(errs) = err else {
            panic!("expected validation error");
        };
        assert!(errs
            .iter()
            .any(|e| e.path == "workload.generator.fractions"));
    }

    #[test]
    fn all_errors_reported() {
        let text = r#"
[device]
hdm_bytes = 4096
num_ports = 2
lock_region_bytes = 100

[coherence]
mode = "imprecise"
granularity_bytes = 100

[latency]
cxl_extra_ns = 300

[hosts]
count = 3
"#;
        let ConfigError::Validation(errs) = SimConfig::from_toml_str(text).unwrap_err() else {
            panic!("expected validation error");
        };
        let paths: Vec<&str> = errs.iter().map(|e| e.path.as_str()).collect();
        assert!(paths.contains(&"device"));
        assert!(paths.contains(&"hosts.count"));
        assert!(paths.contains(&"coherence.granularity_bytes"));
        assert!(paths.contains(&"latency.cxl_extra_ns"));
    }

    #[test]
    fn parse_errors_carry_position() {
        let text = "[device]\nhdm_bytes = 4096\nnum_ports = \"two\"\n[hosts]\ncount = 1\n";
        match SimConfig::from_toml_str(text) {
            Err(ConfigError::Parse { line, column, .. }) => {
                assert_eq!(line, 3);
                assert!(column >= 1);
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = SimConfig::from_toml_str("[device]\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn port_tables_and_pgas() {
        let text = format!(
            "{MINIMAL}
[[ports]]
id = 1
remap = [[\"0x1_0000_0000\", \"0x0\", \"16MiB\"]]

[pgas]
heap_base = \"0x100000\"
heap_bytes = \"1MiB\"
meta_bytes = 4096
"
        );
        let c = SimConfig::from_toml_str(&text).unwrap();
        let t = c.remap_tables();
        assert_eq!(t[1].hpa_to_dpa(0x1_0000_0040).unwrap(), 0x40);
        assert_eq!(c.pgas_layout().unwrap().heap_base, 0x100000);
    }

    #[test]
    fn seed_env_override() {
        let mut c = SimConfig::from_toml_str(MINIMAL).unwrap();
        std::env::set_var(SEED_ENV, "0x2a");
        let r = c.apply_seed_env();
        std::env::remove_var(SEED_ENV);
        r.unwrap();
        assert_eq!(c.seed, 42);
    }

    fn arb_config() -> impl Strategy<Value = SimConfig> {
        (
            any::<u64>(),
            2usize..8,
            0u32..3,
            prop_oneof![
                Just(ModeName::Precise),
                Just(ModeName::Imprecise),
                Just(ModeName::Hybrid)
            ],
            proptest::option::of(1usize..1000),
            any::<bool>(),
            proptest::option::of(1usize..4),
        )
            .prop_map(|(seed, ports, shift, mode, cap, with_pgas, gen_hosts)| {
                let mut c = SimConfig::minimal(16 << 20, ports, ports.min(4));
                c.seed = seed;
                c.device.lock_region_bytes = 4096 << shift;
                c.coherence.mode = mode;
                c.coherence.cache_capacity_lines = cap;
                if mode == ModeName::Hybrid {
                    c.coherence.precise_ranges = vec![[Hex(0), Hex(0x10000)]];
                }
                c.ports = vec![PortSection {
                    id: 1,
                    remap: vec![[Hex(0x4000_0000), Hex(0), Hex(16 << 20)]],
                }];
                if with_pgas {
                    c.pgas = Some(PgasSection {
                        heap_base: 0x10_0000,
                        heap_bytes: 1 << 20,
                        meta_bytes: 4096,
                    });
                }
                if let Some(h) = gen_hosts {
                    c.workload.generator = Some(WorkloadSpec {
                        num_ops: 10,
                        read_fraction: 0.25,
                        write_fraction: 0.5,
                        atomic_fraction: 0.25,
                        num_hosts: h.min(c.hosts.count),
                        ..WorkloadSpec::default()
                    });
                } else {
                    c.workload.ops = Some("t=0 host=0 read addr=0x0 len=8\n".into());
                }
                c
            })
    }

    proptest! {
        #[test]
        fn round_trip(c in arb_config()) {
            c.validate().unwrap();
            let text = c.to_toml_string();
            let back = SimConfig::from_toml_str(&text).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
