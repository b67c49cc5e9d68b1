//! Address spaces and per-port remapping.
//!
//! Every host reaches the device through one port. Each port owns a
//! [`RemapTable`] translating host physical addresses (HPA) to device HDM
//! addresses (DPA). Two ports whose tables land on the same device range are
//! what makes memory shared.

use std::fmt;

use thiserror::Error;

/// Cache line size in bytes. Every tracking and remap unit is a multiple of it.
pub const LINE_BYTES: u64 = 64;

/// Default page size used for imprecise tracking and sparse HDM storage.
pub const PAGE_BYTES: u64 = 4096;

/// Addresses are 52 bits wide, stored in a `u64`.
pub const ADDRESS_BITS: u32 = 52;
pub const ADDRESS_LIMIT: u64 = 1 << ADDRESS_BITS;

pub type PortId = usize;

/// Which address space an overlap was detected in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddressSpace {
    Host,
    Device,
}

impl fmt::Display for AddressSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AddressSpace::Host => f.write_str("host"),
            AddressSpace::Device => f.write_str("device"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AddrError {
    #[error("remap table for port {port} is empty")]
    EmptyTable { port: PortId },

    #[error("remap entries {first} and {second} of port {port} overlap in {space} space")]
    Overlap {
        port: PortId,
        first: usize,
        second: usize,
        space: AddressSpace,
    },

    #[error("remap entry {index} of port {port}: {reason}")]
    Alignment {
        port: PortId,
        index: usize,
        reason: &'static str,
    },

    #[error("address {addr:#x} is not mapped by port {port}")]
    Unmapped { port: PortId, addr: u64 },
}

/// One contiguous HPA range and where it lands in device space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RemapEntry {
    pub host_base: u64,
    pub device_base: u64,
    pub length: u64,
}

impl RemapEntry {
    pub const fn new(host_base: u64, device_base: u64, length: u64) -> Self {
        Self {
            host_base,
            device_base,
            length,
        }
    }

    fn host_end(&self) -> u64 {
        self.host_base + self.length
    }

    fn device_end(&self) -> u64 {
        self.device_base + self.length
    }
}

impl From<(u64, u64, u64)> for RemapEntry {
    fn from((host_base, device_base, length): (u64, u64, u64)) -> Self {
        Self::new(host_base, device_base, length)
    }
}

/// Validated HPA to DPA translation for one port.
///
/// Entries are sorted by host base. A second index sorted by device base
/// backs the reverse lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemapTable {
    port: PortId,
    entries: Vec<RemapEntry>,
    by_device: Vec<usize>,
}

impl RemapTable {
    /// Validates and sorts `entries`.
    pub fn build<I, E>(port: PortId, entries: I) -> Result<Self, AddrError>
    where
        I: IntoIterator<Item = E>,
        E: Into<RemapEntry>,
    {
        let mut entries: Vec<RemapEntry> = entries.into_iter().map(Into::into).collect();
        if entries.is_empty() {
            return Err(AddrError::EmptyTable { port });
        }
        for (index, e) in entries.iter().enumerate() {
            let reason = if e.length == 0 {
                Some("length must be positive")
            } else if e.length % LINE_BYTES != 0 {
                Some("length must be a multiple of 64 bytes")
            } else if e.host_base % LINE_BYTES != 0 || e.device_base % LINE_BYTES != 0 {
                Some("bases must be 64-byte aligned")
            } else if e
                .host_base
                .checked_add(e.length)
                .is_none_or(|end| end > ADDRESS_LIMIT)
                || e.device_base
                    .checked_add(e.length)
                    .is_none_or(|end| end > ADDRESS_LIMIT)
            {
                Some("range exceeds the 52-bit address space")
            } else {
                None
            };
            if let Some(reason) = reason {
                return Err(AddrError::Alignment {
                    port,
                    index,
                    reason,
                });
            }
        }

        // Remember caller positions so overlap errors name the entries as given.
        let mut order: Vec<usize> = (0..entries.len()).collect();
        order.sort_by_key(|&i| entries[i].host_base);
        for pair in order.windows(2) {
            let (a, b) = (entries[pair[0]], entries[pair[1]]);
            if a.host_end() > b.host_base {
                return Err(overlap(port, pair[0], pair[1], AddressSpace::Host));
            }
        }
        let mut dev_order: Vec<usize> = (0..entries.len()).collect();
        dev_order.sort_by_key(|&i| entries[i].device_base);
        for pair in dev_order.windows(2) {
            let (a, b) = (entries[pair[0]], entries[pair[1]]);
            if a.device_end() > b.device_base {
                return Err(overlap(port, pair[0], pair[1], AddressSpace::Device));
            }
        }

        entries.sort_by_key(|e| e.host_base);
        let mut by_device: Vec<usize> = (0..entries.len()).collect();
        by_device.sort_by_key(|&i| entries[i].device_base);
        Ok(Self {
            port,
            entries,
            by_device,
        })
    }

    /// A single entry mapping `[0, length)` onto itself.
    pub fn identity(port: PortId, length: u64) -> Result<Self, AddrError> {
        Self::build(port, [RemapEntry::new(0, 0, length)])
    }

    pub fn port(&self) -> PortId {
        self.port
    }

    pub fn entries(&self) -> &[RemapEntry] {
        &self.entries
    }

    pub fn hpa_to_dpa(&self, hpa: u64) -> Result<u64, AddrError> {
        let idx = self.entries.partition_point(|e| e.host_base <= hpa);
        idx.checked_sub(1)
            .map(|i| self.entries[i])
            .filter(|e| hpa < e.host_end())
            .map(|e| e.device_base + (hpa - e.host_base))
            .ok_or(AddrError::Unmapped {
                port: self.port,
                addr: hpa,
            })
    }

    pub fn dpa_to_hpa(&self, dpa: u64) -> Result<u64, AddrError> {
        let idx = self
            .by_device
            .partition_point(|&i| self.entries[i].device_base <= dpa);
        idx.checked_sub(1)
            .map(|i| self.entries[self.by_device[i]])
            .filter(|e| dpa < e.device_end())
            .map(|e| e.host_base + (dpa - e.device_base))
            .ok_or(AddrError::Unmapped {
                port: self.port,
                addr: dpa,
            })
    }

    /// Translates `[hpa, hpa + len)`. The whole range must sit inside one entry.
    pub fn translate_range(&self, hpa: u64, len: u64) -> Result<u64, AddrError> {
        let dpa = self.hpa_to_dpa(hpa)?;
        if len > 1 {
            let last = hpa + len - 1;
            if self.hpa_to_dpa(last)? != dpa + len - 1 {
                return Err(AddrError::Unmapped {
                    port: self.port,
                    addr: last,
                });
            }
        }
        Ok(dpa)
    }

    /// Whether every byte of the device range `[dpa, dpa + len)` is reachable.
    pub fn covers_device_range(&self, dpa: u64, len: u64) -> bool {
        let mut cursor = dpa;
        let end = dpa + len;
        while cursor < end {
            let Ok(hpa) = self.dpa_to_hpa(cursor) else {
                return false;
            };
            let i = self.entries.partition_point(|e| e.host_base <= hpa) - 1;
            cursor = self.entries[i].device_end();
        }
        true
    }

    /// Largest device address reached by this table, exclusive.
    pub fn device_extent(&self) -> u64 {
        self.entries
            .iter()
            .map(RemapEntry::device_end)
            .max()
            .unwrap_or(0)
    }
}

fn overlap(port: PortId, a: usize, b: usize, space: AddressSpace) -> AddrError {
    AddrError::Overlap {
        port,
        first: a.min(b),
        second: a.max(b),
        space,
    }
}

/// Line, page and lock-region sizes for one simulated system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GranularityConfig {
    pub line_bytes: u64,
    pub page_bytes: u64,
    pub region_bytes: u64,
}

impl GranularityConfig {
    pub fn new(page_bytes: u64, region_bytes: u64) -> Result<Self, &'static str> {
        if !page_bytes.is_power_of_two() || page_bytes < LINE_BYTES {
            return Err("page size must be a power of two of at least 64 bytes");
        }
        if !region_bytes.is_power_of_two() || region_bytes < LINE_BYTES {
            return Err("region size must be a power of two of at least 64 bytes");
        }
        Ok(Self {
            line_bytes: LINE_BYTES,
            page_bytes,
            region_bytes,
        })
    }

    /// Whether line | page | region holds.
    pub fn is_nested(&self) -> bool {
        self.page_bytes.is_multiple_of(self.line_bytes)
            && self.region_bytes.is_multiple_of(self.page_bytes)
    }
}

impl Default for GranularityConfig {
    fn default() -> Self {
        Self {
            line_bytes: LINE_BYTES,
            page_bytes: PAGE_BYTES,
            region_bytes: PAGE_BYTES,
        }
    }
}

/// Index of the `unit_bytes`-sized unit containing `dpa`.
#[inline]
pub fn unit_index(dpa: u64, unit_bytes: u64) -> u64 {
    debug_assert!(unit_bytes.is_power_of_two() && unit_bytes >= LINE_BYTES);
    dpa >> unit_bytes.trailing_zeros()
}

#[inline]
pub fn line_index(dpa: u64) -> u64 {
    unit_index(dpa, LINE_BYTES)
}

#[inline]
pub fn line_base(dpa: u64) -> u64 {
    dpa & !(LINE_BYTES - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn builds_identity_and_disjoint_tables() {
        let t = RemapTable::build(0, [(0x0, 0x0, 0x1000)]).unwrap();
        assert_eq!(t.entries().len(), 1);

        let t = RemapTable::build(
            1,
            [(0x2000_0000, 0x1000, 0x1000), (0x1000_0000, 0x0, 0x1000)],
        )
        .unwrap();
        assert_eq!(t.entries().len(), 2);
        assert_eq!(t.entries()[0].host_base, 0x1000_0000);
    }

    #[test]
    fn rejects_host_overlap() {
        let err = RemapTable::build(0, [(0x0, 0x0, 0x2000), (0x1000, 0x4000, 0x1000)]).unwrap_err();
        assert_eq!(
            err,
            AddrError::Overlap {
                port: 0,
                first: 0,
                second: 1,
                space: AddressSpace::Host
            }
        );
    }

    #[test]
    fn rejects_device_overlap() {
        let err = RemapTable::build(0, [(0x0, 0x0, 0x2000), (0x8000, 0x1000, 0x1000)]).unwrap_err();
        assert!(matches!(
            err,
            AddrError::Overlap {
                space: AddressSpace::Device,
                ..
            }
        ));
    }

    #[test]
    fn rejects_bad_lengths() {
        assert!(matches!(
            RemapTable::build(0, [(0x0, 0x0, 0x30)]),
            Err(AddrError::Alignment { index: 0, .. })
        ));
        assert!(matches!(
            RemapTable::build(0, [(0x0, 0x0, 0x0)]),
            Err(AddrError::Alignment { .. })
        ));
        assert!(matches!(
            RemapTable::build(3, Vec::<RemapEntry>::new()),
            Err(AddrError::EmptyTable { port: 3 })
        ));
    }

    #[test]
    fn forward_and_reverse_translation() {
        let id = RemapTable::identity(0, 0x1000).unwrap();
        assert_eq!(id.hpa_to_dpa(0x1000 - 1).unwrap(), 0xfff);
        assert_eq!(id.dpa_to_hpa(0x40).unwrap(), 0x40);
        assert_eq!(
            id.hpa_to_dpa(0x2000),
            Err(AddrError::Unmapped {
                port: 0,
                addr: 0x2000
            })
        );
        assert!(id.dpa_to_hpa(0x1000).is_err());

        let t = RemapTable::build(0, [(0x1000_0000, 0x0, 0x1000_0000)]).unwrap();
        assert_eq!(t.hpa_to_dpa(0x1000_0040).unwrap(), 0x40);
        assert_eq!(t.dpa_to_hpa(0x40).unwrap(), 0x1000_0040);
    }

    #[test]
    fn forward_translation_matches_linear_scan() {
        // Oracle: scan entries in caller order, no sorting or search.
        let raw = [
            RemapEntry::new(0x3000, 0x0, 0x400),
            RemapEntry::new(0x0, 0x800, 0x200),
            RemapEntry::new(0x1000, 0x400, 0x100),
        ];
        let t = RemapTable::build(0, raw).unwrap();
        for hpa in 0..0x4000u64 {
            let expected = raw
                .iter()
                .find(|e| hpa >= e.host_base && hpa < e.host_base + e.length)
                .map(|e| e.device_base + hpa - e.host_base);
            assert_eq!(t.hpa_to_dpa(hpa).ok(), expected, "hpa {hpa:#x}");
        }
    }

    #[test]
    fn range_translation_rejects_straddle() {
        let t = RemapTable::build(0, [(0x0, 0x1000, 0x40), (0x40, 0x0, 0x40)]).unwrap();
        assert_eq!(t.translate_range(0x0, 0x40).unwrap(), 0x1000);
        assert!(t.translate_range(0x20, 0x40).is_err());
        assert!(t.covers_device_range(0x0, 0x40));
        assert!(!t.covers_device_range(0x0, 0x80));
    }

    #[test]
    fn unit_index_examples() {
        assert_eq!(unit_index(0x0, 64), 0);
        assert_eq!(unit_index(0x1040, 64), 4160 / 64);
        assert_eq!(unit_index(0x1040, 64), 65);
        assert_eq!(unit_index(0x1040, 4096), 4160 / 4096);
    }

    #[test]
    fn granularity_nesting() {
        let g = GranularityConfig::new(4096, 1 << 21).unwrap();
        assert!(g.is_nested());
        assert!(GranularityConfig::new(100, 4096).is_err());
    }

    fn table_strategy() -> impl Strategy<Value = Vec<RemapEntry>> {
        // Up to 4 entries, each 1..=16 lines, placed in shuffled slots so the
        // table is valid by construction; covers at most 2^20 bytes.
        (1usize..=4, any::<u64>()).prop_flat_map(|(n, salt)| {
            proptest::collection::vec(1u64..=16, n).prop_map(move |lens| {
                let mut host_slots: Vec<u64> = (0..lens.len() as u64).collect();
                let mut dev_slots = host_slots.clone();
                host_slots.rotate_left((salt % lens.len() as u64) as usize);
                dev_slots.reverse();
                lens.iter()
                    .enumerate()
                    .map(|(i, l)| {
                        RemapEntry::new(
                            host_slots[i] * 0x4000,
                            dev_slots[i] * 0x1000 + 0x40,
                            l * 64,
                        )
                    })
                    .collect()
            })
        })
    }

    proptest! {
        #[test]
        fn round_trip_over_all_mapped_addresses(entries in table_strategy()) {
            let t = RemapTable::build(0, entries.clone()).unwrap();
            for e in &entries {
                for off in 0..e.length {
                    let hpa = e.host_base + off;
                    let dpa = t.hpa_to_dpa(hpa).unwrap();
                    prop_assert_eq!(dpa, e.device_base + off);
                    prop_assert_eq!(t.dpa_to_hpa(dpa).unwrap(), hpa);
                }
            }
        }

        #[test]
        fn coarser_units_contain_finer(dpa in 0u64..ADDRESS_LIMIT, shift in 0u32..24) {
            let line = unit_index(dpa, LINE_BYTES);
            let coarse = 64u64 << shift;
            let unit = unit_index(dpa, coarse);
            let ratio = coarse / LINE_BYTES;
            prop_assert!(line >= unit * ratio);
            prop_assert!(line < (unit + 1) * ratio);
        }
    }
}
