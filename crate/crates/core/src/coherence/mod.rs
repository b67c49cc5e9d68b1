//! Device-side sharer tracking and Back-Invalidation snoop generation.
//!
//! Three filter modes are modelled:
//!
//! * `Precise`: one directory entry per 64B line.
//! * `Imprecise`: one entry per `granularity` bytes. A write snoops every
//!   host recorded for the unit even if that host never touched the written
//!   line; those snoops are classified `Unnecessary`.
//! * `Hybrid`: precise tracking inside designated DPA ranges, software
//!   managed coherence (explicit flushes) everywhere else.
//!
//! A BI snoop always names the written line, and a target drops exactly that
//! line. Under precise tracking the target then leaves the line's entry.
//! Under imprecise tracking the device cannot tell whether the target still
//! caches other lines of the unit, so it stays recorded. The directory is
//! therefore always a superset of the true sharers.

mod cache;

pub use cache::{CachedLine, HostCache, LineData, LineState};

use std::collections::BTreeMap;

use thiserror::Error;

use crate::addrmap::{line_index, unit_index, LINE_BYTES, PAGE_BYTES};

pub type HostId = usize;

/// Default fixed part of a directory entry (tag and state), in bytes.
pub const DEFAULT_ENTRY_BASE_BYTES: u64 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoherenceError {
    #[error("address {dpa:#x} is software managed")]
    SoftwareManagedAddress { dpa: u64 },

    #[error("range [{start:#x}, {end:#x}) overlaps hardware coherent memory")]
    HardwareCoherentAddress { start: u64, end: u64 },

    #[error("invalid filter mode: {0}")]
    InvalidMode(String),
}

/// Half-open device address range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DpaRange {
    pub start: u64,
    pub end: u64,
}

impl DpaRange {
    pub const fn new(start: u64, end: u64) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, dpa: u64) -> bool {
        dpa >= self.start && dpa < self.end
    }

    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn intersect(&self, other: &DpaRange) -> Option<DpaRange> {
        let r = DpaRange::new(self.start.max(other.start), self.end.min(other.end));
        (!r.is_empty()).then_some(r)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FilterMode {
    Precise,
    Imprecise { granularity: u64 },
    Hybrid { precise_ranges: Vec<DpaRange> },
}

impl FilterMode {
    pub fn imprecise_default() -> Self {
        FilterMode::Imprecise {
            granularity: PAGE_BYTES,
        }
    }

    /// Checks granularity and range invariants and sorts hybrid ranges.
    pub fn validated(self) -> Result<Self, CoherenceError> {
        match self {
            FilterMode::Precise => Ok(FilterMode::Precise),
            FilterMode::Imprecise { granularity } => {
                if granularity.is_power_of_two() && granularity >= LINE_BYTES {
                    Ok(FilterMode::Imprecise { granularity })
                } else {
                    Err(CoherenceError::InvalidMode(format!(
                        "granularity {granularity} is not a power of two >= 64"
                    )))
                }
            }
            FilterMode::Hybrid { mut precise_ranges } => {
                precise_ranges.sort();
                for r in &precise_ranges {
                    if r.is_empty() || r.start % LINE_BYTES != 0 || r.end % LINE_BYTES != 0 {
                        return Err(CoherenceError::InvalidMode(format!(
                            "precise range [{:#x}, {:#x}) is empty or not 64-byte aligned",
                            r.start, r.end
                        )));
                    }
                }
                for w in precise_ranges.windows(2) {
                    if w[0].end > w[1].start {
                        return Err(CoherenceError::InvalidMode(format!(
                            "precise ranges [{:#x}, {:#x}) and [{:#x}, {:#x}) overlap",
                            w[0].start, w[0].end, w[1].start, w[1].end
                        )));
                    }
                }
                Ok(FilterMode::Hybrid { precise_ranges })
            }
        }
    }

    /// Size of one tracking unit.
    pub fn unit_bytes(&self) -> u64 {
        match self {
            FilterMode::Imprecise { granularity } => *granularity,
            _ => LINE_BYTES,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FilterMode::Precise => "precise",
            FilterMode::Imprecise { .. } => "imprecise",
            FilterMode::Hybrid { .. } => "hybrid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coherency {
    HardwareCoherent,
    SoftwareManaged,
}

pub fn classify(dpa: u64, mode: &FilterMode) -> Coherency {
    match mode {
        FilterMode::Precise | FilterMode::Imprecise { .. } => Coherency::HardwareCoherent,
        FilterMode::Hybrid { precise_ranges } => {
            let i = precise_ranges.partition_point(|r| r.start <= dpa);
            if i > 0 && precise_ranges[i - 1].contains(dpa) {
                Coherency::HardwareCoherent
            } else {
                Coherency::SoftwareManaged
            }
        }
    }
}

/// Sharer bitmask per tracking unit. Bit `h` set means host `h` may cache
/// some line of the unit. Entries persist once created.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SharerDirectory {
    entries: BTreeMap<u64, u64>,
}

impl SharerDirectory {
    pub fn sharers(&self, unit: u64) -> u64 {
        self.entries.get(&unit).copied().unwrap_or(0)
    }

    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    pub fn add(&mut self, unit: u64, host: HostId) {
        *self.entries.entry(unit).or_insert(0) |= 1 << host;
    }

    pub fn remove(&mut self, unit: u64, host: HostId) {
        if let Some(mask) = self.entries.get_mut(&unit) {
            *mask &= !(1 << host);
        }
    }

    pub fn units(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.entries.iter().map(|(u, m)| (*u, *m))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnoopClass {
    Necessary,
    Unnecessary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BiSnoop {
    pub target: HostId,
    /// DPA line id (dpa / 64).
    pub line: u64,
    pub issued_at: u64,
    pub class: SnoopClass,
}

impl BiSnoop {
    pub fn line_dpa(&self) -> u64 {
        self.line * LINE_BYTES
    }
}

#[derive(Debug, Clone)]
pub struct SnoopFilter {
    mode: FilterMode,
    directory: SharerDirectory,
    num_hosts: usize,
    entry_base_bytes: u64,
}

impl SnoopFilter {
    pub fn new(mode: FilterMode, num_hosts: usize) -> Result<Self, CoherenceError> {
        if num_hosts == 0 || num_hosts > 64 {
            return Err(CoherenceError::InvalidMode(format!(
                "host count {num_hosts} outside 1..=64"
            )));
        }
        Ok(Self {
            mode: mode.validated()?,
            directory: SharerDirectory::default(),
            num_hosts,
            entry_base_bytes: DEFAULT_ENTRY_BASE_BYTES,
        })
    }

    pub fn with_entry_base_bytes(mut self, bytes: u64) -> Self {
        self.entry_base_bytes = bytes;
        self
    }

    pub fn mode(&self) -> &FilterMode {
        &self.mode
    }

    pub fn directory(&self) -> &SharerDirectory {
        &self.directory
    }

    pub fn num_hosts(&self) -> usize {
        self.num_hosts
    }

    pub fn classify(&self, dpa: u64) -> Coherency {
        classify(dpa, &self.mode)
    }

    fn unit_of(&self, dpa: u64) -> u64 {
        unit_index(dpa, self.mode.unit_bytes())
    }

    /// Installs `data` as a Shared line in `host`'s cache and, for hardware
    /// coherent addresses, records `host` as a sharer. A line the host
    /// already holds Modified keeps its state.
    pub fn record_read(
        &mut self,
        caches: &mut [HostCache],
        host: HostId,
        dpa: u64,
        data: &LineData,
    ) {
        let line = line_index(dpa);
        if self.classify(dpa) == Coherency::HardwareCoherent {
            self.directory.add(self.unit_of(dpa), host);
        }
        let cache = &mut caches[host];
        let state = match cache.state(line) {
            Some(LineState::Modified) => LineState::Modified,
            _ => LineState::Shared,
        };
        cache.insert(line, state, *data);
    }

    /// Back-invalidates every other recorded sharer of the written line's
    /// unit, then leaves `writer` holding `data` Modified.
    pub fn snoops_for_write(
        &mut self,
        caches: &mut [HostCache],
        writer: HostId,
        dpa: u64,
        data: &LineData,
        now: u64,
    ) -> Result<Vec<BiSnoop>, CoherenceError> {
        let snoops = self.invalidate_sharers(caches, Some(writer), dpa, now)?;
        self.directory.add(self.unit_of(dpa), writer);
        caches[writer].insert(line_index(dpa), LineState::Modified, *data);
        Ok(snoops)
    }

    /// Snoops for a write performed inside the device (atomics), which has
    /// no caching writer: every recorded sharer is targeted.
    pub fn snoops_for_device_write(
        &mut self,
        caches: &mut [HostCache],
        dpa: u64,
        now: u64,
    ) -> Result<Vec<BiSnoop>, CoherenceError> {
        self.invalidate_sharers(caches, None, dpa, now)
    }

    fn invalidate_sharers(
        &mut self,
        caches: &mut [HostCache],
        writer: Option<HostId>,
        dpa: u64,
        now: u64,
    ) -> Result<Vec<BiSnoop>, CoherenceError> {
        if self.classify(dpa) == Coherency::SoftwareManaged {
            return Err(CoherenceError::SoftwareManagedAddress { dpa });
        }
        let unit = self.unit_of(dpa);
        let line = line_index(dpa);
        let exact = self.mode.unit_bytes() == LINE_BYTES;
        let mask = self.directory.sharers(unit);
        let mut snoops = Vec::new();
        for target in (0..self.num_hosts).filter(|h| mask & (1 << h) != 0) {
            if Some(target) == writer {
                continue;
            }
            let held = caches[target].invalidate(line);
            snoops.push(BiSnoop {
                target,
                line,
                issued_at: now,
                class: if held {
                    SnoopClass::Necessary
                } else {
                    SnoopClass::Unnecessary
                },
            });
            if exact {
                self.directory.remove(unit, target);
            }
        }
        Ok(snoops)
    }

    /// Software coherence path: drops `cache`'s lines inside `range`.
    /// Refuses ranges that touch hardware coherent memory.
    pub fn software_flush(
        &self,
        cache: &mut HostCache,
        range: DpaRange,
    ) -> Result<usize, CoherenceError> {
        if range.is_empty() {
            return Ok(0);
        }
        let hw = match &self.mode {
            FilterMode::Precise | FilterMode::Imprecise { .. } => true,
            FilterMode::Hybrid { precise_ranges } => {
                precise_ranges.iter().any(|r| r.intersect(&range).is_some())
            }
        };
        if hw {
            return Err(CoherenceError::HardwareCoherentAddress {
                start: range.start,
                end: range.end,
            });
        }
        Ok(cache.invalidate_lines(line_index(range.start), range.end.div_ceil(LINE_BYTES)))
    }

    /// The software managed sub-ranges of `range`, in address order.
    pub fn software_ranges_within(&self, range: DpaRange) -> Vec<DpaRange> {
        match &self.mode {
            FilterMode::Precise | FilterMode::Imprecise { .. } => Vec::new(),
            FilterMode::Hybrid { precise_ranges } => {
                let mut out = Vec::new();
                let mut cursor = range.start;
                for r in precise_ranges {
                    if r.end <= cursor {
                        continue;
                    }
                    if r.start >= range.end {
                        break;
                    }
                    if r.start > cursor {
                        out.push(DpaRange::new(cursor, r.start));
                    }
                    cursor = cursor.max(r.end);
                }
                if cursor < range.end {
                    out.push(DpaRange::new(cursor, range.end));
                }
                out
            }
        }
    }

    /// Metadata bytes held by the directory.
    pub fn directory_footprint(&self) -> u64 {
        self.directory.entry_count() as u64 * self.entry_bytes()
    }

    pub fn entry_bytes(&self) -> u64 {
        self.entry_base_bytes + (self.num_hosts as u64).div_ceil(8)
    }
}

/// Drops every cached copy of lines in `range` from all caches, without
/// touching the directory. Used when the device rewrites a whole region.
pub fn invalidate_everywhere(caches: &mut [HostCache], range: DpaRange) -> usize {
    let (first, last) = (line_index(range.start), range.end.div_ceil(LINE_BYTES));
    caches
        .iter_mut()
        .map(|c| c.invalidate_lines(first, last))
        .sum()
}
