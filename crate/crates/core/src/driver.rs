//! Per-host shared memory driver.
//!
//! Applications register with the driver on their host, map shared regions,
//! and ask for write permission. The driver talks to the device on behalf of
//! its host's port: one outstanding device request per region per port,
//! with a local FIFO of applications behind it. Grants are delivered as
//! [`GrantNotice`]s for the caller to schedule.
//!
//! When the last mapper of a region departs, the region is zeroized before
//! anyone can map it again. If the region is still held through a raw MMIO
//! lock at that point, clearing is deferred to the next map.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::addrmap::PortId;
use crate::coherence::HostId;
use crate::device::{AclResponse, Device, DeviceError, Handoff};

pub type AppId = u64;

/// First virtual address handed out to an application's mappings.
pub const VIRTUAL_BASE: u64 = 0x7f00_0000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AppKey {
    pub host: HostId,
    pub app: AppId,
}

impl AppKey {
    pub fn new(host: HostId, app: AppId) -> Self {
        Self { host, app }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppState {
    Registered,
    Active,
    Departed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Permission {
    ReadOnly,
    ReadWrite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionRecord {
    pub region: usize,
    pub virtual_base: u64,
    pub physical_base: u64,
    pub granularity: u64,
    pub permission: Permission,
}

impl RegionRecord {
    pub fn virtual_to_physical(&self, va: u64) -> Option<u64> {
        let off = va.checked_sub(self.virtual_base)?;
        (off < self.granularity).then_some(self.physical_base + off)
    }
}

#[derive(Debug, Clone)]
pub struct AppContext {
    pub key: AppKey,
    pub state: AppState,
    pub regions: Vec<RegionRecord>,
    next_virtual: u64,
}

impl AppContext {
    pub fn record(&self, region: usize) -> Option<&RegionRecord> {
        self.regions.iter().find(|r| r.region == region)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DriverError {
    #[error("app {app} is already registered on host {host}")]
    DuplicateApp { host: HostId, app: AppId },

    #[error("app {app} is not registered on host {host}")]
    UnknownApp { host: HostId, app: AppId },

    #[error("host {0} has no driver")]
    UnknownHost(HostId),

    #[error("region {0} does not exist or is not reachable from this host")]
    UnknownRegion(usize),

    #[error("region {0} cannot be mapped with the requested permission")]
    PermissionUnsupported(usize),

    #[error("region {0} is not mapped by this app")]
    NotMapped(usize),

    #[error("region {0} is mapped read-only")]
    ReadOnlyRegion(usize),

    #[error("app does not hold the write grant for region {0}")]
    NotHolder(usize),

    #[error(transparent)]
    Device(#[from] DeviceError),
}

/// An application has been granted write access.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GrantNotice {
    pub key: AppKey,
    pub region: usize,
    pub requested_at: u64,
    pub granted_at: u64,
}

impl GrantNotice {
    pub fn wait_ns(&self) -> u64 {
        self.granted_at - self.requested_at
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcquireOutcome {
    Granted(GrantNotice),
    Pending,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Zeroized {
    pub region: usize,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MapOutcome {
    pub record: RegionRecord,
    /// Deferred clearing performed before this mapping was served.
    pub zeroized: Option<Zeroized>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UnregisterOutcome {
    pub released: Vec<usize>,
    pub grants: Vec<GrantNotice>,
    pub zeroized: Vec<Zeroized>,
    pub deferred: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
struct PortRegion {
    holder: Option<AppId>,
    waiting: VecDeque<(AppId, u64)>,
    device_queued: bool,
}

#[derive(Debug, Clone, Default)]
struct HostDriver {
    apps: BTreeMap<AppId, AppContext>,
    regions: BTreeMap<usize, PortRegion>,
}

/// Drivers for every host, plus the cross-host mapping bookkeeping that
/// decides when a region must be cleared.
#[derive(Debug, Clone)]
pub struct Drivers {
    hosts: Vec<HostDriver>,
    mappers: BTreeMap<usize, usize>,
    pending_zeroize: BTreeSet<usize>,
    write_protected: Vec<(u64, u64)>,
}

impl Drivers {
    pub fn new(num_hosts: usize) -> Self {
        Self {
            hosts: vec![HostDriver::default(); num_hosts],
            mappers: BTreeMap::new(),
            pending_zeroize: BTreeSet::new(),
            write_protected: Vec::new(),
        }
    }

    /// Device ranges that may only be mapped read-only.
    pub fn with_write_protected(mut self, ranges: Vec<(u64, u64)>) -> Self {
        self.write_protected = ranges;
        self
    }

    fn port(host: HostId) -> PortId {
        host
    }

    fn host(&self, host: HostId) -> Result<&HostDriver, DriverError> {
        self.hosts.get(host).ok_or(DriverError::UnknownHost(host))
    }

    fn host_mut(&mut self, host: HostId) -> Result<&mut HostDriver, DriverError> {
        self.hosts
            .get_mut(host)
            .ok_or(DriverError::UnknownHost(host))
    }

    fn live_app_mut(&mut self, key: AppKey) -> Result<&mut AppContext, DriverError> {
        self.host_mut(key.host)?
            .apps
            .get_mut(&key.app)
            .filter(|c| c.state != AppState::Departed)
            .ok_or(DriverError::UnknownApp {
                host: key.host,
                app: key.app,
            })
    }

    pub fn context(&self, key: AppKey) -> Option<&AppContext> {
        self.hosts.get(key.host)?.apps.get(&key.app)
    }

    pub fn mapper_count(&self, region: usize) -> usize {
        self.mappers.get(&region).copied().unwrap_or(0)
    }

    pub fn is_pending_zeroize(&self, region: usize) -> bool {
        self.pending_zeroize.contains(&region)
    }

    /// App currently holding `region` on `host`'s port, if any.
    pub fn holder_app(&self, host: HostId, region: usize) -> Option<AppId> {
        self.hosts.get(host)?.regions.get(&region)?.holder
    }

    /// Apps waiting locally on `host` for `region`, in order.
    pub fn waiting_apps(&self, host: HostId, region: usize) -> Vec<AppId> {
        self.hosts
            .get(host)
            .and_then(|h| h.regions.get(&region))
            .map(|r| r.waiting.iter().map(|(a, _)| *a).collect())
            .unwrap_or_default()
    }

    pub fn register_app(&mut self, host: HostId, app: AppId) -> Result<&AppContext, DriverError> {
        let h = self.host_mut(host)?;
        if h.apps
            .get(&app)
            .is_some_and(|c| c.state != AppState::Departed)
        {
            return Err(DriverError::DuplicateApp { host, app });
        }
        let ctx = AppContext {
            key: AppKey::new(host, app),
            state: AppState::Registered,
            regions: Vec::new(),
            next_virtual: VIRTUAL_BASE,
        };
        h.apps.insert(app, ctx);
        Ok(&h.apps[&app])
    }

    /// Maps `region` into the app. Re-mapping an already mapped region
    /// updates its permission and returns the existing record.
    pub fn map_shared_region(
        &mut self,
        key: AppKey,
        region: usize,
        permission: Permission,
        device: &mut Device,
    ) -> Result<MapOutcome, DriverError> {
        let (base, len) = device.region_range(region);
        if region >= device.config().num_lock_words() {
            return Err(DriverError::UnknownRegion(region));
        }
        let table = device.table(Self::port(key.host))?;
        if !table.covers_device_range(base, len) {
            return Err(DriverError::UnknownRegion(region));
        }
        let physical_base = table.dpa_to_hpa(base).map_err(DeviceError::from)?;
        if permission == Permission::ReadWrite
            && self
                .write_protected
                .iter()
                .any(|&(s, l)| s < base + len && base < s + l)
        {
            return Err(DriverError::PermissionUnsupported(region));
        }
        // Validate the app before touching device state.
        self.live_app_mut(key)?;

        let mut zeroized = None;
        if self.pending_zeroize.contains(&region) {
            let bytes = device.zeroize_region(region)?;
            self.pending_zeroize.remove(&region);
            zeroized = Some(Zeroized { region, bytes });
        }

        let ctx = self.live_app_mut(key)?;
        ctx.state = AppState::Active;
        if let Some(rec) = ctx.regions.iter_mut().find(|r| r.region == region) {
            rec.permission = permission;
            return Ok(MapOutcome {
                record: *rec,
                zeroized,
            });
        }
        let record = RegionRecord {
            region,
            virtual_base: ctx.next_virtual,
            physical_base,
            granularity: len,
            permission,
        };
        ctx.next_virtual += len;
        ctx.regions.push(record);
        *self.mappers.entry(region).or_insert(0) += 1;
        Ok(MapOutcome { record, zeroized })
    }

    pub fn acquire_write(
        &mut self,
        key: AppKey,
        region: usize,
        device: &mut Device,
        now: u64,
    ) -> Result<AcquireOutcome, DriverError> {
        let ctx = self.live_app_mut(key)?;
        match ctx.record(region).map(|r| r.permission) {
            None => return Err(DriverError::NotMapped(region)),
            Some(Permission::ReadOnly) => return Err(DriverError::ReadOnlyRegion(region)),
            Some(Permission::ReadWrite) => {}
        }
        let port = Self::port(key.host);
        let state = self.host_mut(key.host)?.regions.entry(region).or_default();
        if state.holder == Some(key.app) {
            return Ok(AcquireOutcome::Granted(GrantNotice {
                key,
                region,
                requested_at: now,
                granted_at: now,
            }));
        }
        if state.waiting.iter().any(|(a, _)| *a == key.app) {
            return Ok(AcquireOutcome::Pending);
        }
        if state.holder.is_some() || state.device_queued {
            state.waiting.push_back((key.app, now));
            return Ok(AcquireOutcome::Pending);
        }
        match device.acl_request_write(port, region, now)? {
            AclResponse::Granted => {
                state.holder = Some(key.app);
                Ok(AcquireOutcome::Granted(GrantNotice {
                    key,
                    region,
                    requested_at: now,
                    granted_at: now,
                }))
            }
            AclResponse::Enqueued(_) => {
                state.device_queued = true;
                state.waiting.push_back((key.app, now));
                Ok(AcquireOutcome::Pending)
            }
        }
    }

    /// Routes a device-side promotion to the app waiting behind it.
    pub fn deliver_handoff(&mut self, handoff: Handoff) -> Option<GrantNotice> {
        let host = handoff.port;
        let state = self.hosts.get_mut(host)?.regions.get_mut(&handoff.region)?;
        if !state.device_queued {
            return None;
        }
        state.device_queued = false;
        let (app, requested_at) = state.waiting.pop_front()?;
        state.holder = Some(app);
        Some(GrantNotice {
            key: AppKey::new(host, app),
            region: handoff.region,
            requested_at,
            granted_at: handoff.granted_at,
        })
    }

    pub fn release_write(
        &mut self,
        key: AppKey,
        region: usize,
        device: &mut Device,
        now: u64,
    ) -> Result<Vec<GrantNotice>, DriverError> {
        self.live_app_mut(key)?;
        self.release_inner(key, region, device, now)
    }

    fn release_inner(
        &mut self,
        key: AppKey,
        region: usize,
        device: &mut Device,
        now: u64,
    ) -> Result<Vec<GrantNotice>, DriverError> {
        let port = Self::port(key.host);
        let holds = self
            .host(key.host)?
            .regions
            .get(&region)
            .is_some_and(|s| s.holder == Some(key.app));
        if !holds {
            return Err(DriverError::NotHolder(region));
        }
        let handoff = device.acl_release_write(port, region, now)?;
        let mut notices = Vec::new();
        if let Some(h) = handoff {
            notices.extend(self.deliver_handoff(h));
        }
        let state = self
            .host_mut(key.host)?
            .regions
            .get_mut(&region)
            .expect("holder state exists");
        state.holder = None;
        // Local waiters line up behind everyone already queued at the device.
        if let Some(&(app, requested_at)) = state.waiting.front() {
            match device.acl_request_write(port, region, now)? {
                AclResponse::Granted => {
                    state.waiting.pop_front();
                    state.holder = Some(app);
                    notices.push(GrantNotice {
                        key: AppKey::new(key.host, app),
                        region,
                        requested_at,
                        granted_at: now,
                    });
                }
                AclResponse::Enqueued(_) => state.device_queued = true,
            }
        }
        Ok(notices)
    }

    /// Tears the app down: releases its grants, withdraws its requests and
    /// clears regions nobody maps any more.
    pub fn unregister_app(
        &mut self,
        key: AppKey,
        device: &mut Device,
        now: u64,
    ) -> Result<UnregisterOutcome, DriverError> {
        let regions: Vec<usize> = self
            .live_app_mut(key)?
            .regions
            .iter()
            .map(|r| r.region)
            .collect();
        let mut out = UnregisterOutcome::default();
        let port = Self::port(key.host);

        let touched: Vec<usize> = self.host(key.host)?.regions.keys().copied().collect();
        for region in touched {
            let state = &self.hosts[key.host].regions[&region];
            if state.holder == Some(key.app) {
                out.grants
                    .extend(self.release_inner(key, region, device, now)?);
                out.released.push(region);
                continue;
            }
            let state = self.hosts[key.host]
                .regions
                .get_mut(&region)
                .expect("present");
            if let Some(pos) = state.waiting.iter().position(|(a, _)| *a == key.app) {
                state.waiting.remove(pos);
                if pos == 0 && state.device_queued && state.waiting.is_empty() {
                    device.acl_cancel_request(port, region, now);
                    state.device_queued = false;
                }
            }
        }

        let ctx = self.live_app_mut(key)?;
        ctx.state = AppState::Departed;
        ctx.regions.clear();

        for region in regions {
            let count = self.mappers.entry(region).or_insert(1);
            *count -= 1;
            if *count > 0 {
                continue;
            }
            self.mappers.remove(&region);
            match device.zeroize_region(region) {
                Ok(bytes) => out.zeroized.push(Zeroized { region, bytes }),
                Err(DeviceError::RegionHeld { .. }) => {
                    self.pending_zeroize.insert(region);
                    out.deferred.push(region);
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(out)
    }
}
