//! Multi-headed Type-3 device: shared HDM, MMIO lock words and the access
//! control logic that hands out region write permission in arrival order.
//!
//! All ports alias one lock word per region, so a grant observed on one
//! port is visible on every other port. The lock word is the single source
//! of truth for the current holder; the grant queue only stores waiters.
//! When a holder clears its word while others wait, the head waiter is
//! installed in the same step.

mod acl;
mod hdm;

pub use acl::{holder_of, token, GrantQueue, LockRegisterFile, Waiter};
pub use hdm::HdmStore;

use thiserror::Error;

use crate::addrmap::{line_base, AddrError, PortId, RemapTable, LINE_BYTES};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeviceError {
    #[error("lock index {idx} out of range (device has {len} lock words)")]
    IndexOutOfRange { idx: usize, len: usize },

    #[error("lock word value {value} is neither free nor a valid port token")]
    InvalidToken { value: u64 },

    #[error("port {port} does not exist")]
    InvalidPort { port: PortId },

    #[error("port {port} is already waiting on region {region}")]
    DuplicateWaiter { port: PortId, region: usize },

    #[error("port {port} released region {region} held by {holder:?}")]
    NotHolder {
        port: PortId,
        region: usize,
        holder: Option<PortId>,
    },

    #[error("region {region} is held by port {holder}")]
    RegionHeld { region: usize, holder: PortId },

    #[error("access of {len} bytes at {addr:#x} crosses a 64-byte line")]
    CrossesLine { addr: u64, len: usize },

    #[error(transparent)]
    Unmapped(#[from] AddrError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceConfig {
    pub num_ports: usize,
    pub hdm_bytes: u64,
    pub lock_region_bytes: u64,
}

impl DeviceConfig {
    pub fn new(num_ports: usize, hdm_bytes: u64, lock_region_bytes: u64) -> Result<Self, String> {
        if num_ports < 2 {
            return Err(format!("num_ports must be at least 2, got {num_ports}"));
        }
        if num_ports > 64 {
            return Err(format!("num_ports must be at most 64, got {num_ports}"));
        }
        if !lock_region_bytes.is_power_of_two() || lock_region_bytes < LINE_BYTES {
            return Err(format!(
                "lock_region_bytes must be a power of two >= 64, got {lock_region_bytes}"
            ));
        }
        if hdm_bytes == 0 || !hdm_bytes.is_multiple_of(lock_region_bytes) {
            return Err(format!(
                "hdm_bytes {hdm_bytes} is not a positive multiple of lock_region_bytes {lock_region_bytes}"
            ));
        }
        Ok(Self {
            num_ports,
            hdm_bytes,
            lock_region_bytes,
        })
    }

    pub fn num_lock_words(&self) -> usize {
        (self.hdm_bytes / self.lock_region_bytes) as usize
    }

    pub fn region_of(&self, dpa: u64) -> usize {
        (dpa / self.lock_region_bytes) as usize
    }

    /// Bytes of lock state for this layout: one 64-bit word per region.
    pub fn lock_table_bytes(&self) -> u64 {
        self.num_lock_words() as u64 * 8
    }
}

/// Result of a write permission request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AclResponse {
    Granted,
    /// 1-based position among waiters.
    Enqueued(usize),
}

/// A waiter promoted to holder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Handoff {
    pub region: usize,
    pub port: PortId,
    pub requested_at: u64,
    pub granted_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CasOutcome {
    pub prior: u64,
    pub swapped: bool,
    pub handoff: Option<Handoff>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteOutcome {
    pub dpa: u64,
    /// The writer did not hold the region's write grant.
    pub violation: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AclEventKind {
    Request,
    Grant,
    Release,
    Cancel,
}

/// Audit record of every lock word transition and queue arrival.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AclEvent {
    pub time: u64,
    pub region: usize,
    pub port: PortId,
    pub kind: AclEventKind,
    /// Raised by a raw MMIO atomic rather than the request/release path.
    pub mmio: bool,
}

#[derive(Debug, Clone)]
pub struct Device {
    config: DeviceConfig,
    tables: Vec<RemapTable>,
    hdm: HdmStore,
    locks: LockRegisterFile,
    queue: GrantQueue,
    log: Vec<AclEvent>,
    clock: u64,
}

impl Device {
    /// `tables[p]` is the remap table of port `p`.
    pub fn new(config: DeviceConfig, tables: Vec<RemapTable>) -> Result<Self, DeviceError> {
        if tables.len() != config.num_ports {
            return Err(DeviceError::InvalidPort {
                port: tables.len().min(config.num_ports),
            });
        }
        Ok(Self {
            hdm: HdmStore::new(config.hdm_bytes),
            locks: LockRegisterFile::new(config.num_lock_words()),
            queue: GrantQueue::default(),
            log: Vec::new(),
            clock: 0,
            config,
            tables,
        })
    }

    /// Device with identity tables on every port.
    pub fn with_identity_ports(config: DeviceConfig) -> Self {
        let tables = (0..config.num_ports)
            .map(|p| RemapTable::identity(p, config.hdm_bytes).expect("valid device size"))
            .collect();
        Self::new(config, tables).expect("one table per port")
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.config
    }

    pub fn table(&self, port: PortId) -> Result<&RemapTable, DeviceError> {
        self.tables
            .get(port)
            .ok_or(DeviceError::InvalidPort { port })
    }

    pub fn hdm(&self) -> &HdmStore {
        &self.hdm
    }

    pub fn locks(&self) -> &LockRegisterFile {
        &self.locks
    }

    pub fn grant_queue(&self) -> &GrantQueue {
        &self.queue
    }

    pub fn acl_log(&self) -> &[AclEvent] {
        &self.log
    }

    /// Timestamp applied to log records of operations that take no `now`.
    pub fn set_clock(&mut self, now: u64) {
        self.clock = now;
    }

    pub fn holder(&self, region: usize) -> Option<PortId> {
        self.locks.get(region).and_then(holder_of)
    }

    fn check_port(&self, port: PortId) -> Result<(), DeviceError> {
        if port < self.config.num_ports {
            Ok(())
        } else {
            Err(DeviceError::InvalidPort { port })
        }
    }

    fn check_index(&self, idx: usize) -> Result<(), DeviceError> {
        if idx < self.locks.len() {
            Ok(())
        } else {
            Err(DeviceError::IndexOutOfRange {
                idx,
                len: self.locks.len(),
            })
        }
    }

    fn record(&mut self, region: usize, port: PortId, kind: AclEventKind, mmio: bool) {
        self.log.push(AclEvent {
            time: self.clock,
            region,
            port,
            kind,
            mmio,
        });
    }

    /// Writes a new lock word, logging the implied release and grant.
    fn store_word(&mut self, idx: usize, value: u64, mmio: bool) {
        let prior = self.locks.get(idx).unwrap_or(0);
        if prior == value {
            return;
        }
        if let Some(old) = holder_of(prior) {
            self.record(idx, old, AclEventKind::Release, mmio);
        }
        self.locks.set(idx, value);
        if let Some(new) = holder_of(value) {
            self.record(idx, new, AclEventKind::Grant, mmio);
        }
    }

    /// If the word is free and someone waits, promote the head waiter.
    fn promote_head(&mut self, idx: usize, mmio: bool) -> Option<Handoff> {
        if self.locks.get(idx) != Some(0) {
            return None;
        }
        let w = self.queue.pop(idx)?;
        self.store_word(idx, token(w.port), mmio);
        Some(Handoff {
            region: idx,
            port: w.port,
            requested_at: w.requested_at,
            granted_at: self.clock,
        })
    }

    pub fn mmio_test_and_set(&mut self, port: PortId, lock_idx: usize) -> Result<u64, DeviceError> {
        self.check_port(port)?;
        self.check_index(lock_idx)?;
        let prior = self.locks.get(lock_idx).unwrap_or(0);
        if prior == 0 {
            self.store_word(lock_idx, token(port), true);
        }
        Ok(prior)
    }

    pub fn mmio_compare_and_swap(
        &mut self,
        port: PortId,
        lock_idx: usize,
        expected: u64,
        new: u64,
    ) -> Result<CasOutcome, DeviceError> {
        self.check_port(port)?;
        self.check_index(lock_idx)?;
        if new > self.config.num_ports as u64 {
            return Err(DeviceError::InvalidToken { value: new });
        }
        let prior = self.locks.get(lock_idx).unwrap_or(0);
        if prior != expected {
            return Ok(CasOutcome {
                prior,
                swapped: false,
                handoff: None,
            });
        }
        if let Some(p) = holder_of(new) {
            self.queue.remove(lock_idx, p);
        }
        self.store_word(lock_idx, new, true);
        let handoff = self.promote_head(lock_idx, true);
        Ok(CasOutcome {
            prior,
            swapped: true,
            handoff,
        })
    }

    pub fn acl_request_write(
        &mut self,
        port: PortId,
        region_idx: usize,
        now: u64,
    ) -> Result<AclResponse, DeviceError> {
        self.check_port(port)?;
        self.check_index(region_idx)?;
        self.clock = now;
        let word = self.locks.get(region_idx).unwrap_or(0);
        if word == token(port) {
            return Ok(AclResponse::Granted);
        }
        if self.queue.contains(region_idx, port) {
            return Err(DeviceError::DuplicateWaiter {
                port,
                region: region_idx,
            });
        }
        self.record(region_idx, port, AclEventKind::Request, false);
        if word == 0 {
            debug_assert_eq!(self.queue.len(region_idx), 0);
            self.store_word(region_idx, token(port), false);
            Ok(AclResponse::Granted)
        } else {
            Ok(AclResponse::Enqueued(
                self.queue.push(region_idx, port, now),
            ))
        }
    }

    pub fn acl_release_write(
        &mut self,
        port: PortId,
        region_idx: usize,
        now: u64,
    ) -> Result<Option<Handoff>, DeviceError> {
        self.check_port(port)?;
        self.check_index(region_idx)?;
        self.clock = now;
        let word = self.locks.get(region_idx).unwrap_or(0);
        if word != token(port) {
            return Err(DeviceError::NotHolder {
                port,
                region: region_idx,
                holder: holder_of(word),
            });
        }
        self.store_word(region_idx, 0, false);
        Ok(self.promote_head(region_idx, false))
    }

    /// Withdraws a queued request. Returns whether one was queued.
    pub fn acl_cancel_request(&mut self, port: PortId, region_idx: usize, now: u64) -> bool {
        self.clock = now;
        let removed = self.queue.remove(region_idx, port).is_some();
        if removed {
            self.record(region_idx, port, AclEventKind::Cancel, false);
        }
        removed
    }

    fn line_check(addr: u64, len: usize) -> Result<(), DeviceError> {
        if len == 0
            || len as u64 > LINE_BYTES
            || line_base(addr) != line_base(addr + len as u64 - 1)
        {
            return Err(DeviceError::CrossesLine { addr, len });
        }
        Ok(())
    }

    pub fn translate(&self, port: PortId, hpa: u64, len: usize) -> Result<u64, DeviceError> {
        let dpa = self.table(port)?.translate_range(hpa, len.max(1) as u64)?;
        Ok(dpa)
    }

    /// Reads never consult the lock state.
    pub fn hdm_read(&self, port: PortId, hpa: u64, len: usize) -> Result<Vec<u8>, DeviceError> {
        let dpa = self.translate(port, hpa, len)?;
        Self::line_check(dpa, len)?;
        Ok(self.hdm.read_vec(dpa, len))
    }

    /// Stores unconditionally and reports whether the port lacked the grant.
    pub fn hdm_write(
        &mut self,
        port: PortId,
        hpa: u64,
        data: &[u8],
    ) -> Result<WriteOutcome, DeviceError> {
        let dpa = self.translate(port, hpa, data.len())?;
        self.write_dpa(port, dpa, data)
    }

    pub fn read_dpa(&self, dpa: u64, len: usize) -> Result<Vec<u8>, DeviceError> {
        Self::line_check(dpa, len)?;
        Ok(self.hdm.read_vec(dpa, len))
    }

    pub fn write_dpa(
        &mut self,
        port: PortId,
        dpa: u64,
        data: &[u8],
    ) -> Result<WriteOutcome, DeviceError> {
        self.check_port(port)?;
        Self::line_check(dpa, data.len())?;
        self.hdm.write(dpa, data);
        let violation = self.holder(self.config.region_of(dpa)) != Some(port);
        Ok(WriteOutcome { dpa, violation })
    }

    /// Device-side compare-and-swap on an aligned 8-byte HDM word. Runs in
    /// the device's atomic unit, so it bypasses the write grant check.
    pub fn hdm_compare_and_swap(
        &mut self,
        dpa: u64,
        expected: u64,
        new: u64,
    ) -> Result<(u64, bool), DeviceError> {
        Self::line_check(dpa, 8)?;
        let prior = self.hdm.read_u64(dpa);
        let swapped = prior == expected;
        if swapped {
            self.hdm.write_u64(dpa, new);
        }
        Ok((prior, swapped))
    }

    /// Clears a region before it is handed to a new owner. Returns the
    /// number of stored bytes actually cleared.
    pub fn zeroize_region(&mut self, region_idx: usize) -> Result<u64, DeviceError> {
        self.check_index(region_idx)?;
        if let Some(holder) = self.holder(region_idx) {
            return Err(DeviceError::RegionHeld {
                region: region_idx,
                holder,
            });
        }
        let base = region_idx as u64 * self.config.lock_region_bytes;
        Ok(self.hdm.zero_range(base, self.config.lock_region_bytes))
    }

    pub fn region_range(&self, region_idx: usize) -> (u64, u64) {
        let len = self.config.lock_region_bytes;
        (region_idx as u64 * len, len)
    }

    /// Raw HDM write used for initialising reserved areas. No line limit and
    /// no permission check.
    pub fn fill_dpa(&mut self, dpa: u64, data: &[u8]) {
        self.hdm.write(dpa, data);
    }

    pub fn clear_dpa(&mut self, dpa: u64, len: u64) -> u64 {
        self.hdm.zero_range(dpa, len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev(ports: usize) -> Device {
        Device::with_identity_ports(DeviceConfig::new(ports, 1 << 20, 4096).unwrap())
    }

    #[test]
    fn config_invariants() {
        let c = DeviceConfig::new(2, 1 << 20, 4096).unwrap();
        assert_eq!(c.num_lock_words(), 256);
        assert_eq!(c.lock_table_bytes(), 2048);
        assert!(DeviceConfig::new(1, 1 << 20, 4096).is_err());
        assert!(DeviceConfig::new(2, 1000, 4096).is_err());
        assert!(DeviceConfig::new(2, 1 << 20, 100).is_err());
    }

    #[test]
    fn test_and_set() {
        let mut d = dev(2);
        assert_eq!(d.mmio_test_and_set(0, 0).unwrap(), 0);
        assert_eq!(d.locks().get(0), Some(1));
        assert_eq!(d.mmio_test_and_set(1, 0).unwrap(), 1);
        assert_eq!(d.locks().get(0), Some(1));
        assert_eq!(
            d.mmio_test_and_set(0, 9999),
            Err(DeviceError::IndexOutOfRange {
                idx: 9999,
                len: 256
            })
        );
    }

    #[test]
    fn compare_and_swap() {
        let mut d = dev(2);
        let r = d.mmio_compare_and_swap(1, 0, 0, 2).unwrap();
        assert_eq!((r.prior, r.swapped), (0, true));
        assert_eq!(d.locks().get(0), Some(2));

        let mut d = dev(2);
        d.mmio_test_and_set(0, 0).unwrap();
        let r = d.mmio_compare_and_swap(1, 0, 0, 2).unwrap();
        assert_eq!((r.prior, r.swapped), (1, false));
        assert_eq!(d.locks().get(0), Some(1));

        let mut d = dev(2);
        d.mmio_compare_and_swap(1, 0, 0, 2).unwrap();
        let r = d.mmio_compare_and_swap(1, 0, 2, 0).unwrap();
        assert_eq!((r.prior, r.swapped), (2, true));
        assert_eq!(d.locks().get(0), Some(0));

        assert_eq!(
            d.mmio_compare_and_swap(0, 0, 0, 7),
            Err(DeviceError::InvalidToken { value: 7 })
        );
    }

    #[test]
    fn cas_release_hands_off_to_waiter() {
        let mut d = dev(3);
        d.mmio_test_and_set(0, 4).unwrap();
        d.acl_request_write(2, 4, 10).unwrap();
        let r = d.mmio_compare_and_swap(0, 4, 1, 0).unwrap();
        assert!(r.swapped);
        assert_eq!(r.handoff.map(|h| h.port), Some(2));
        assert_eq!(d.holder(4), Some(2));
    }

    #[test]
    fn request_and_queue_positions() {
        let mut d = dev(3);
        assert_eq!(d.acl_request_write(0, 0, 0).unwrap(), AclResponse::Granted);
        assert_eq!(d.acl_request_write(0, 0, 1).unwrap(), AclResponse::Granted);
        assert_eq!(
            d.acl_request_write(1, 0, 2).unwrap(),
            AclResponse::Enqueued(1)
        );
        assert_eq!(
            d.acl_request_write(2, 0, 3).unwrap(),
            AclResponse::Enqueued(2)
        );
        assert_eq!(
            d.acl_request_write(1, 0, 4),
            Err(DeviceError::DuplicateWaiter { port: 1, region: 0 })
        );
    }

    #[test]
    fn grants_follow_arrival_order() {
        let mut d = dev(4);
        d.acl_request_write(3, 7, 0).unwrap();
        for (t, p) in [(1, 0), (2, 1), (3, 2)] {
            d.acl_request_write(p, 7, t).unwrap();
        }
        let mut order = Vec::new();
        let mut holder = 3;
        for t in 10..13 {
            let h = d.acl_release_write(holder, 7, t).unwrap().unwrap();
            order.push(h.port);
            holder = h.port;
        }
        assert_eq!(order, vec![0, 1, 2]);
    }

    #[test]
    fn release_semantics() {
        let mut d = dev(2);
        d.acl_request_write(0, 0, 0).unwrap();
        d.acl_request_write(1, 0, 5).unwrap();
        let h = d.acl_release_write(0, 0, 9).unwrap().unwrap();
        assert_eq!(h.port, 1);
        assert_eq!(h.requested_at, 5);
        assert_eq!(h.granted_at, 9);
        assert_eq!(d.locks().get(0), Some(2));

        assert_eq!(d.acl_release_write(1, 0, 10).unwrap(), None);
        assert_eq!(d.locks().get(0), Some(0));

        d.acl_request_write(0, 0, 11).unwrap();
        assert_eq!(
            d.acl_release_write(1, 0, 12),
            Err(DeviceError::NotHolder {
                port: 1,
                region: 0,
                holder: Some(0)
            })
        );
    }

    #[test]
    fn reads_and_writes_across_ports() {
        let c = DeviceConfig::new(2, 1 << 20, 4096).unwrap();
        let t0 = RemapTable::identity(0, 1 << 20).unwrap();
        let t1 = RemapTable::build(1, [(0x1000_0000, 0, 1 << 20)]).unwrap();
        let mut d = Device::new(c, vec![t0, t1]).unwrap();
        assert_eq!(d.hdm_read(0, 0x80, 64).unwrap(), vec![0; 64]);

        d.acl_request_write(0, 0, 0).unwrap();
        let w = d.hdm_write(0, 0x80, &[0xab]).unwrap();
        assert!(!w.violation);
        assert_eq!(d.hdm_read(0, 0x80, 1).unwrap(), vec![0xab]);
        assert_eq!(d.hdm_read(1, 0x1000_0080, 1).unwrap(), vec![0xab]);

        // Holder 0, port 1 writes: stored but flagged.
        let w = d.hdm_write(1, 0x1000_0090, &[1, 2]).unwrap();
        assert!(w.violation);
        assert_eq!(d.hdm_read(0, 0x90, 2).unwrap(), vec![1, 2]);

        // Free region, unguarded write.
        assert!(d.hdm_write(1, 0x1000_2000, &[1]).unwrap().violation);

        assert!(matches!(
            d.hdm_read(0, 1 << 20, 1),
            Err(DeviceError::Unmapped(_))
        ));
        assert!(matches!(
            d.hdm_read(0, 0x30, 64),
            Err(DeviceError::CrossesLine { .. })
        ));
    }

    #[test]
    fn zeroize() {
        let mut d = dev(2);
        assert_eq!(d.zeroize_region(3).unwrap(), 0);

        d.hdm_write(0, 3 * 4096 + 8, &[0xff; 16]).unwrap();
        assert!(d.zeroize_region(3).unwrap() > 0);
        assert!(d.hdm().is_zero(3 * 4096, 4096));

        d.acl_request_write(1, 3, 0).unwrap();
        assert_eq!(
            d.zeroize_region(3),
            Err(DeviceError::RegionHeld {
                region: 3,
                holder: 1
            })
        );
    }

    #[test]
    fn device_atomic_word() {
        let mut d = dev(2);
        assert_eq!(d.hdm_compare_and_swap(0x100, 0, 5).unwrap(), (0, true));
        assert_eq!(d.hdm_compare_and_swap(0x100, 0, 6).unwrap(), (5, false));
        assert!(d.hdm_compare_and_swap(0x13c, 0, 1).is_err());
    }

    #[test]
    fn log_records_transitions() {
        let mut d = dev(2);
        d.acl_request_write(0, 1, 0).unwrap();
        d.acl_request_write(1, 1, 1).unwrap();
        d.acl_release_write(0, 1, 2).unwrap();
        let kinds: Vec<_> = d.acl_log().iter().map(|e| (e.kind, e.port)).collect();
        use AclEventKind::*;
        assert_eq!(
            kinds,
            vec![
                (Request, 0),
                (Grant, 0),
                (Request, 1),
                (Release, 0),
                (Grant, 1)
            ]
        );
    }
}
