use std::fmt;

use super::{EngineError, EventKind, EventQueue, LatencyModel, Metrics, TraceRecord};
use crate::addrmap::{line_base, line_index, LINE_BYTES};
use crate::coherence::{
    invalidate_everywhere, BiSnoop, CoherenceError, Coherency, DpaRange, HostCache, HostId,
    LineData, LineState, SnoopClass, SnoopFilter,
};
use crate::config::SimConfig;
use crate::device::{AclEvent, Device, DeviceError};
use crate::driver::{AcquireOutcome, AppId, AppKey, DriverError, Drivers, GrantNotice, Zeroized};
use crate::pgas::{shmem_init, stamp_generation, PeId, PeWorld, PgasError};
use crate::workload::{RegionRef, Verb, Workload};

/// One memory-visible step, in dispatch order. Feeds the reference
/// executors used to check coherence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Access {
    Read {
        seq: u64,
        host: HostId,
        dpa: u64,
        data: Vec<u8>,
        coherency: Coherency,
    },
    /// A host store, including PGAS puts. `snooped` lists BI targets.
    Write {
        seq: u64,
        host: HostId,
        dpa: u64,
        data: Vec<u8>,
        snooped: Vec<HostId>,
    },
    /// A store made by the device itself (atomics, barrier words).
    DeviceWrite {
        seq: u64,
        dpa: u64,
        data: Vec<u8>,
        snooped: Vec<HostId>,
    },
    /// Region cleared; every cached copy was dropped.
    Zeroize { seq: u64, dpa: u64, len: u64 },
    /// A host dropped its software-managed copies of `[start, end)`.
    Flush {
        seq: u64,
        host: HostId,
        start: u64,
        end: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stuck {
    Grant { app: AppId, region: usize },
    Barrier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StuckHost {
    pub host: HostId,
    pub on: Stuck,
}

/// Quiescence with blocked hosts. Carries everything simulated so far.
#[derive(Debug)]
pub struct Deadlock {
    pub waiting: Vec<StuckHost>,
    pub report: RunReport,
}

impl fmt::Display for Deadlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "deadlock at t={}:", self.report.metrics.total_time_ns)?;
        for s in &self.waiting {
            match s.on {
                Stuck::Grant { app, region } => {
                    write!(f, " host {} app {app} waits for region {region};", s.host)?
                }
                Stuck::Barrier => write!(f, " host {} waits in barrier;", s.host)?,
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct RunReport {
    pub metrics: Metrics,
    pub trace: Vec<TraceRecord>,
    pub access_log: Vec<Access>,
    pub acl_log: Vec<AclEvent>,
    pub device: Device,
}

enum Payload {
    Issue { host: HostId },
    Grant { notice: GrantNotice },
    Snoop { snoop: BiSnoop },
    BarrierExit { pe: PeId, generation: u64 },
}

struct HostStream {
    ops: Vec<usize>,
    cursor: usize,
    blocked: Option<Stuck>,
}

struct Pgas {
    world: PeWorld,
    arrived: Vec<PeId>,
    generation: u64,
}

enum Step {
    Done(u64),
    Blocked(Stuck),
}

struct Exec {
    step: Step,
    addr: Option<u64>,
    region: Option<usize>,
    extra: String,
}

impl Exec {
    fn done(latency: u64) -> Self {
        Self {
            step: Step::Done(latency),
            addr: None,
            region: None,
            extra: String::new(),
        }
    }

    fn at(mut self, addr: u64, region: usize) -> Self {
        self.addr = Some(addr);
        self.region = Some(region);
        self
    }

    fn note(mut self, extra: impl Into<String>) -> Self {
        self.extra = extra.into();
        self
    }
}

#[derive(Debug)]
enum OpError {
    Device(DeviceError),
    Driver(DriverError),
    Pgas(PgasError),
    Other(String),
}

impl OpError {
    fn is_not_holder(&self) -> bool {
        matches!(
            self,
            OpError::Driver(DriverError::NotHolder(_))
                | OpError::Device(DeviceError::NotHolder { .. })
                | OpError::Driver(DriverError::Device(DeviceError::NotHolder { .. }))
        )
    }
}

impl fmt::Display for OpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpError::Device(e) => write!(f, "{e}"),
            OpError::Driver(e) => write!(f, "{e}"),
            OpError::Pgas(e) => write!(f, "{e}"),
            OpError::Other(e) => write!(f, "{e}"),
        }
    }
}

impl From<DeviceError> for OpError {
    fn from(e: DeviceError) -> Self {
        OpError::Device(e)
    }
}

impl From<DriverError> for OpError {
    fn from(e: DriverError) -> Self {
        OpError::Driver(e)
    }
}

impl From<PgasError> for OpError {
    fn from(e: PgasError) -> Self {
        OpError::Pgas(e)
    }
}

fn verb_kind(verb: &Verb) -> EventKind {
    match verb {
        Verb::Read { .. } | Verb::Get { .. } => EventKind::HostRead,
        Verb::Write { .. } | Verb::Put { .. } => EventKind::HostWrite,
        Verb::Amo { .. }
        | Verb::MmioTas { .. }
        | Verb::MmioCas { .. }
        | Verb::Cas { .. }
        | Verb::Acquire { .. }
        | Verb::Release { .. } => EventKind::AtomicOp,
        Verb::Register { .. } | Verb::Map { .. } => EventKind::AppArrive,
        Verb::Unregister { .. } => EventKind::AppDepart,
        Verb::Init | Verb::Alloc { .. } => EventKind::Collective,
        Verb::Fence => EventKind::Fence,
        Verb::Barrier => EventKind::Barrier,
    }
}

/// Splits `[dpa, dpa + len)` at line boundaries.
fn line_chunks(dpa: u64, len: u64) -> impl Iterator<Item = (u64, u64)> {
    let end = dpa + len;
    let mut cur = dpa;
    std::iter::from_fn(move || {
        if cur >= end {
            return None;
        }
        let stop = (line_base(cur) + LINE_BYTES).min(end);
        let chunk = (cur, stop - cur);
        cur = stop;
        Some(chunk)
    })
}

/// Keeps trace fields free of the CSV separator.
fn sanitize(text: &str) -> String {
    text.replace(',', ";")
}

struct Sim<'w> {
    latency: LatencyModel,
    device: Device,
    filter: SnoopFilter,
    caches: Vec<HostCache>,
    drivers: Drivers,
    pgas: Option<Pgas>,
    workload: &'w Workload,
    hosts: Vec<HostStream>,
    queue: EventQueue<Payload>,
    metrics: Metrics,
    trace: Vec<TraceRecord>,
    access_log: Vec<Access>,
    seq: u64,
    horizon: u64,
}

/// Runs `workload` against a fresh system built from `config`.
///
/// Each host executes its operations in order: an operation issues at the
/// later of its trace time and the completion of the previous one.
pub fn run(config: &SimConfig, workload: &Workload) -> Result<RunReport, EngineError> {
    config.validate()?;
    workload.check_sorted()?;
    let num_hosts = config.hosts.count;
    if let Some((index, op)) = workload
        .ops
        .iter()
        .enumerate()
        .find(|(_, o)| o.host >= num_hosts)
    {
        return Err(EngineError::HostOutOfRange {
            index,
            host: op.host,
            hosts: num_hosts,
        });
    }

    let device = Device::new(config.device_config(), config.remap_tables())
        .map_err(|e| EngineError::Setup(e.to_string()))?;
    let filter = SnoopFilter::new(config.filter_mode(), num_hosts)
        .map_err(|e| EngineError::Setup(e.to_string()))?
        .with_entry_base_bytes(config.coherence.entry_overhead_bytes);
    let caches = (0..num_hosts)
        .map(|h| match config.coherence.cache_capacity_lines {
            Some(cap) => HostCache::bounded(
                cap,
                config.seed ^ (h as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            ),
            None => HostCache::unbounded(),
        })
        .collect();
    let mut drivers = Drivers::new(num_hosts);
    let pgas = match config.pgas_layout() {
        Some(layout) => {
            let world = shmem_init(num_hosts, layout, config.device.hdm_bytes)
                .map_err(|e| EngineError::Setup(e.to_string()))?;
            drivers = drivers.with_write_protected(vec![world.reserved_range()]);
            Some(Pgas {
                world,
                arrived: Vec::new(),
                generation: 0,
            })
        }
        None => None,
    };

    let mut hosts: Vec<HostStream> = (0..num_hosts)
        .map(|_| HostStream {
            ops: Vec::new(),
            cursor: 0,
            blocked: None,
        })
        .collect();
    let mut first_seen = Vec::new();
    for (i, op) in workload.ops.iter().enumerate() {
        if hosts[op.host].ops.is_empty() {
            first_seen.push(op.host);
        }
        hosts[op.host].ops.push(i);
    }

    let mut sim = Sim {
        latency: config.latency,
        device,
        filter,
        caches,
        drivers,
        pgas,
        workload,
        hosts,
        queue: EventQueue::new(),
        metrics: Metrics::new(num_hosts),
        trace: Vec::new(),
        access_log: Vec::new(),
        seq: 0,
        horizon: 0,
    };
    for host in first_seen {
        sim.schedule_next(host, 0)?;
    }
    sim.run_loop()
}

impl Sim<'_> {
    fn run_loop(mut self) -> Result<RunReport, EngineError> {
        while let Some(ev) = self.queue.pop() {
            self.seq = ev.seq;
            self.horizon = self.horizon.max(ev.time);
            self.device.set_clock(ev.time);
            match ev.payload {
                Payload::Issue { host } => self.issue(host, ev.time)?,
                Payload::Grant { notice } => self.deliver_grant(notice, ev.time)?,
                Payload::Snoop { snoop } => self.deliver_snoop(snoop, ev.time),
                Payload::BarrierExit { pe, generation } => {
                    self.barrier_exit(pe, generation, ev.time)?
                }
            }
        }
        let waiting: Vec<StuckHost> = self
            .hosts
            .iter()
            .enumerate()
            .filter_map(|(host, h)| h.blocked.map(|on| StuckHost { host, on }))
            .collect();
        self.metrics.directory_metadata_bytes = self.filter.directory_footprint();
        self.metrics.total_time_ns = self.horizon;
        let report = RunReport {
            metrics: self.metrics,
            trace: self.trace,
            access_log: self.access_log,
            acl_log: self.device.acl_log().to_vec(),
            device: self.device,
        };
        if waiting.is_empty() {
            Ok(report)
        } else {
            Err(EngineError::Deadlock(Box::new(Deadlock {
                waiting,
                report,
            })))
        }
    }

    fn record(
        &mut self,
        time: u64,
        kind: EventKind,
        host: Option<HostId>,
        addr: Option<u64>,
        region: Option<usize>,
        extra: String,
    ) {
        self.trace.push(TraceRecord {
            time_ns: time,
            seq: self.seq,
            kind,
            host,
            port: host,
            addr,
            region,
            extra,
        });
    }

    /// Queues the host's next operation once it is free at `ready_at`.
    fn schedule_next(&mut self, host: HostId, ready_at: u64) -> Result<(), EngineError> {
        self.horizon = self.horizon.max(ready_at);
        let stream = &self.hosts[host];
        if let Some(&idx) = stream.ops.get(stream.cursor) {
            let t = self.workload.ops[idx].time.max(ready_at);
            self.queue.schedule(t, Payload::Issue { host })?;
        }
        Ok(())
    }

    fn issue(&mut self, host: HostId, now: u64) -> Result<(), EngineError> {
        let stream = &mut self.hosts[host];
        let idx = stream.ops[stream.cursor];
        stream.cursor += 1;
        let verb = self.workload.ops[idx].verb.clone();
        let kind = verb_kind(&verb);

        let counts = &mut self.metrics.per_host[host];
        match kind {
            EventKind::HostRead => counts.reads += 1,
            EventKind::HostWrite => counts.writes += 1,
            _ if matches!(
                verb,
                Verb::Amo { .. } | Verb::MmioTas { .. } | Verb::MmioCas { .. } | Verb::Cas { .. }
            ) =>
            {
                counts.atomics += 1
            }
            _ => {}
        }

        let exec = match self.execute(host, &verb, now) {
            Ok(exec) => exec,
            Err(err) => {
                self.metrics.op_errors += 1;
                if err.is_not_holder() {
                    self.metrics.not_holder_errors += 1;
                }
                Exec::done(self.latency.cache_hit_ns)
                    .note(format!("error={}", sanitize(&err.to_string())))
            }
        };
        let extra = if exec.extra.is_empty() {
            verb.name().to_string()
        } else {
            format!("{};{}", verb.name(), exec.extra)
        };
        self.record(now, kind, Some(host), exec.addr, exec.region, extra);
        match exec.step {
            Step::Done(latency) => self.schedule_next(host, now + latency)?,
            Step::Blocked(on) => self.hosts[host].blocked = Some(on),
        }
        Ok(())
    }

    fn resolve_region(&self, host: HostId, target: RegionRef) -> Result<usize, OpError> {
        match target {
            RegionRef::Index(i) => Ok(i),
            RegionRef::Addr(hpa) => {
                let dpa = self.device.translate(host, hpa, 1)?;
                Ok(self.device.config().region_of(dpa))
            }
        }
    }

    fn grant_later(&mut self, notice: GrantNotice, now: u64) -> Result<(), OpError> {
        self.queue
            .schedule(now + self.latency.atomic_ns, Payload::Grant { notice })
            .map_err(|e| OpError::Other(e.to_string()))?;
        Ok(())
    }

    fn schedule_snoops(&mut self, snoops: Vec<BiSnoop>, now: u64) -> Vec<HostId> {
        let targets = snoops.iter().map(|s| s.target).collect();
        for snoop in snoops {
            self.queue
                .schedule(now + self.latency.bi_snoop_ns, Payload::Snoop { snoop })
                .expect("future event");
        }
        targets
    }

    fn after_zeroize(&mut self, z: Zeroized) {
        self.metrics.zeroized_bytes += z.bytes;
        let (base, len) = self.device.region_range(z.region);
        invalidate_everywhere(&mut self.caches, DpaRange::new(base, base + len));
        self.access_log.push(Access::Zeroize {
            seq: self.seq,
            dpa: base,
            len,
        });
    }

    /// Reads through `host`'s cache. Returns the latency and whether any
    /// byte differed from device memory.
    fn read_range(&mut self, host: HostId, dpa: u64, len: u64) -> (u64, bool) {
        let mut latency = 0;
        let mut stale = false;
        for (cdpa, clen) in line_chunks(dpa, len) {
            let line = line_index(cdpa);
            let off = (cdpa - line_base(cdpa)) as usize;
            let range = off..off + clen as usize;
            let (bytes, hit) = match self.caches[host].get(line) {
                Some(c) => (c.data[range].to_vec(), true),
                None => {
                    let mut data: LineData = [0; LINE_BYTES as usize];
                    self.device.hdm().read(line_base(cdpa), &mut data);
                    self.filter.record_read(&mut self.caches, host, cdpa, &data);
                    (data[range].to_vec(), false)
                }
            };
            if bytes != self.device.hdm().read_vec(cdpa, clen as usize) {
                stale = true;
            }
            self.access_log.push(Access::Read {
                seq: self.seq,
                host,
                dpa: cdpa,
                data: bytes,
                coherency: self.filter.classify(cdpa),
            });
            latency += self.latency.access_latency(EventKind::HostRead, hit);
        }
        (latency, stale)
    }

    /// Write-through store from `host`. With `checked`, stores into a region
    /// the port does not hold are counted as protocol violations.
    fn write_range(
        &mut self,
        host: HostId,
        dpa: u64,
        data: &[u8],
        checked: bool,
        now: u64,
    ) -> Result<(u64, usize, u64), OpError> {
        let mut latency = 0;
        let mut snoop_count = 0;
        let mut violations = 0;
        let mut consumed = 0usize;
        for (cdpa, clen) in line_chunks(dpa, data.len() as u64) {
            let chunk = &data[consumed..consumed + clen as usize];
            consumed += clen as usize;
            if checked {
                if self.device.write_dpa(host, cdpa, chunk)?.violation {
                    violations += 1;
                }
            } else {
                self.device.fill_dpa(cdpa, chunk);
            }
            let mut line: LineData = [0; LINE_BYTES as usize];
            self.device.hdm().read(line_base(cdpa), &mut line);
            let snoops =
                match self
                    .filter
                    .snoops_for_write(&mut self.caches, host, cdpa, &line, now)
                {
                    Ok(s) => s,
                    Err(CoherenceError::SoftwareManagedAddress { .. }) => {
                        self.caches[host].insert(line_index(cdpa), LineState::Modified, line);
                        Vec::new()
                    }
                    Err(e) => return Err(OpError::Other(e.to_string())),
                };
            snoop_count += snoops.len();
            let mut step = self.latency.access_latency(EventKind::HostWrite, false);
            if !snoops.is_empty() {
                step = step.max(self.latency.bi_snoop_ns);
            }
            latency += step;
            let snooped = self.schedule_snoops(snoops, now);
            self.access_log.push(Access::Write {
                seq: self.seq,
                host,
                dpa: cdpa,
                data: chunk.to_vec(),
                snooped,
            });
        }
        self.metrics.protocol_violations += violations;
        Ok((latency, snoop_count, violations))
    }

    /// Device-side compare-and-swap on an HDM word, with back-invalidation
    /// of cached copies when it stores.
    fn device_cas(
        &mut self,
        dpa: u64,
        expected: u64,
        new: u64,
        now: u64,
    ) -> Result<(u64, bool, u64), OpError> {
        let (prior, swapped) = self.device.hdm_compare_and_swap(dpa, expected, new)?;
        let mut latency = self.latency.atomic_ns;
        if swapped {
            let snoops = match self
                .filter
                .snoops_for_device_write(&mut self.caches, dpa, now)
            {
                Ok(s) => s,
                Err(CoherenceError::SoftwareManagedAddress { .. }) => Vec::new(),
                Err(e) => return Err(OpError::Other(e.to_string())),
            };
            if !snoops.is_empty() {
                latency = latency.max(self.latency.bi_snoop_ns);
            }
            let snooped = self.schedule_snoops(snoops, now);
            self.access_log.push(Access::DeviceWrite {
                seq: self.seq,
                dpa,
                data: new.to_le_bytes().to_vec(),
                snooped,
            });
        }
        Ok((prior, swapped, latency))
    }

    fn pgas(&mut self) -> Result<&mut Pgas, OpError> {
        self.pgas
            .as_mut()
            .ok_or_else(|| OpError::Other("no [pgas] section configured".into()))
    }

    /// Drops `pe`'s cached copies of software-managed heap data.
    fn flush_heap(&mut self, pe: PeId) -> Result<usize, OpError> {
        let (start, len) = self.pgas()?.world.data_range();
        let mut dropped = 0;
        for r in self
            .filter
            .software_ranges_within(DpaRange::new(start, start + len))
        {
            dropped += self
                .filter
                .software_flush(&mut self.caches[pe], r)
                .map_err(|e| OpError::Other(e.to_string()))?;
            self.access_log.push(Access::Flush {
                seq: self.seq,
                host: pe,
                start: r.start,
                end: r.end,
            });
        }
        Ok(dropped)
    }

    fn execute(&mut self, host: HostId, verb: &Verb, now: u64) -> Result<Exec, OpError> {
        let key = |app| AppKey::new(host, app);
        let lat = self.latency;
        match verb {
            Verb::Read { addr, len } => {
                if *len == 0 {
                    return Err(OpError::Other("zero-length read".into()));
                }
                let dpa = self.device.translate(host, *addr, *len as usize)?;
                let region = self.device.config().region_of(dpa);
                let (latency, stale) = self.read_range(host, dpa, *len);
                let mut exec = Exec::done(latency).at(*addr, region);
                if stale {
                    self.metrics.stale_reads += 1;
                    exec = exec.note("stale");
                }
                Ok(exec)
            }
            Verb::Write { addr, data } => {
                if data.is_empty() {
                    return Err(OpError::Other("empty write".into()));
                }
                let dpa = self.device.translate(host, *addr, data.len())?;
                let region = self.device.config().region_of(dpa);
                let (latency, snoops, violations) = self.write_range(host, dpa, data, true, now)?;
                let mut note = format!("len={};snoops={snoops}", data.len());
                if violations > 0 {
                    note.push_str(";violation");
                }
                Ok(Exec::done(latency).at(*addr, region).note(note))
            }
            Verb::Amo {
                addr,
                expected,
                new,
            } => {
                let dpa = self.device.translate(host, *addr, 8)?;
                if dpa % 8 != 0 {
                    return Err(OpError::Other(format!(
                        "atomic at {addr:#x} is not 8-byte aligned"
                    )));
                }
                let region = self.device.config().region_of(dpa);
                let (prior, swapped, latency) = self.device_cas(dpa, *expected, *new, now)?;
                Ok(Exec::done(latency)
                    .at(*addr, region)
                    .note(format!("prior={prior};swapped={}", swapped as u8)))
            }
            Verb::MmioTas { lock } => {
                let prior = self.device.mmio_test_and_set(host, *lock)?;
                let mut exec = Exec::done(lat.atomic_ns).note(format!("prior={prior}"));
                exec.region = Some(*lock);
                Ok(exec)
            }
            Verb::MmioCas {
                lock,
                expected,
                new,
            } => {
                let out = self
                    .device
                    .mmio_compare_and_swap(host, *lock, *expected, *new)?;
                if let Some(h) = out.handoff {
                    if let Some(notice) = self.drivers.deliver_handoff(h) {
                        self.grant_later(notice, now)?;
                    }
                }
                let mut exec = Exec::done(lat.atomic_ns)
                    .note(format!("prior={};swapped={}", out.prior, out.swapped as u8));
                exec.region = Some(*lock);
                Ok(exec)
            }
            Verb::Register { app } => {
                self.drivers.register_app(host, *app)?;
                Ok(Exec::done(lat.access_latency(EventKind::AppArrive, false))
                    .note(format!("app={app}")))
            }
            Verb::Map { app, target, perm } => {
                let region = self.resolve_region(host, *target)?;
                let out =
                    self.drivers
                        .map_shared_region(key(*app), region, *perm, &mut self.device)?;
                let mut note = format!("app={app};va={:#x}", out.record.virtual_base);
                if let Some(z) = out.zeroized {
                    note.push_str(&format!(";zeroized={}", z.bytes));
                    self.after_zeroize(z);
                }
                let mut exec =
                    Exec::done(lat.access_latency(EventKind::AppArrive, false)).note(note);
                exec.region = Some(region);
                Ok(exec)
            }
            Verb::Acquire { app, target } => {
                let region = self.resolve_region(host, *target)?;
                let outcome =
                    self.drivers
                        .acquire_write(key(*app), region, &mut self.device, now)?;
                let note = match outcome {
                    AcquireOutcome::Granted(notice) => {
                        self.grant_later(notice, now)?;
                        format!("app={app};granted")
                    }
                    AcquireOutcome::Pending => format!("app={app};queued"),
                };
                Ok(Exec {
                    step: Step::Blocked(Stuck::Grant { app: *app, region }),
                    addr: None,
                    region: Some(region),
                    extra: note,
                })
            }
            Verb::Release { app, target } => {
                let region = self.resolve_region(host, *target)?;
                let notices =
                    self.drivers
                        .release_write(key(*app), region, &mut self.device, now)?;
                for n in notices {
                    self.grant_later(n, now)?;
                }
                let mut exec = Exec::done(lat.atomic_ns).note(format!("app={app}"));
                exec.region = Some(region);
                Ok(exec)
            }
            Verb::Unregister { app } => {
                let out = self
                    .drivers
                    .unregister_app(key(*app), &mut self.device, now)?;
                for n in out.grants {
                    self.grant_later(n, now)?;
                }
                let mut cleared = 0;
                for z in out.zeroized {
                    cleared += z.bytes;
                    self.after_zeroize(z);
                }
                Ok(
                    Exec::done(lat.access_latency(EventKind::AppDepart, false)).note(format!(
                        "app={app};released={};zeroized={cleared};deferred={}",
                        out.released.len(),
                        out.deferred.len()
                    )),
                )
            }
            Verb::Init => {
                let p = self.pgas()?;
                let first = p.world.mark_initialized(host)?;
                if first {
                    let words = p.world.initial_reserved_words();
                    for (dpa, value) in words {
                        let prior = self.device.hdm().read_u64(dpa);
                        self.device_cas(dpa, prior, value, now)?;
                    }
                }
                Ok(Exec::done(lat.atomic_ns).note(if first { "first" } else { "join" }))
            }
            Verb::Alloc { size, align } => {
                let p = self.pgas()?;
                p.world.ensure_initialized(host)?;
                let obj = p.world.shmalloc_on(host, *size, *align)?;
                let dpa = p.world.object_dpa(&obj);
                Ok(Exec::done(lat.access_latency(EventKind::Collective, false))
                    .note(format!("obj={};size={}", obj.id, obj.size))
                    .at(dpa, self.device.config().region_of(dpa)))
            }
            Verb::Put {
                obj,
                pe,
                offset,
                data,
            } => {
                let dpa = self.pgas_element(host, *obj, *pe, *offset, data.len() as u64)?;
                if data.is_empty() {
                    return Err(OpError::Other("empty put".into()));
                }
                let (latency, snoops, _) = self.write_range(host, dpa, data, false, now)?;
                Ok(Exec::done(latency)
                    .at(dpa, self.device.config().region_of(dpa))
                    .note(format!("pe={pe};snoops={snoops}")))
            }
            Verb::Get {
                obj,
                pe,
                offset,
                len,
            } => {
                let dpa = self.pgas_element(host, *obj, *pe, *offset, *len)?;
                if *len == 0 {
                    return Err(OpError::Other("zero-length get".into()));
                }
                let (latency, stale) = self.read_range(host, dpa, *len);
                let mut note = format!("pe={pe}");
                if stale {
                    self.metrics.stale_reads += 1;
                    note.push_str(";stale");
                }
                Ok(Exec::done(latency)
                    .at(dpa, self.device.config().region_of(dpa))
                    .note(note))
            }
            Verb::Cas {
                obj,
                offset,
                expected,
                new,
            } => {
                let p = self.pgas()?;
                p.world.ensure_initialized(host)?;
                let o = p.world.object(host, *obj)?;
                let dpa = p.world.atomic_word_dpa(&o, *offset)?;
                if self.filter.classify(dpa) == Coherency::SoftwareManaged {
                    return Err(PgasError::SoftwareManagedAtomic(dpa).into());
                }
                let (prior, swapped, latency) = self.device_cas(dpa, *expected, *new, now)?;
                Ok(Exec::done(latency)
                    .at(dpa, self.device.config().region_of(dpa))
                    .note(format!("prior={prior};swapped={}", swapped as u8)))
            }
            Verb::Fence => {
                self.pgas()?.world.ensure_initialized(host)?;
                let dropped = self.flush_heap(host)?;
                Ok(Exec::done(lat.access_latency(EventKind::Fence, false))
                    .note(format!("flushed={dropped}")))
            }
            Verb::Barrier => self.barrier_arrive(host, now),
        }
    }

    fn pgas_element(
        &mut self,
        host: HostId,
        obj: usize,
        pe: PeId,
        offset: u64,
        len: u64,
    ) -> Result<u64, OpError> {
        let p = self.pgas()?;
        p.world.ensure_initialized(host)?;
        if pe >= p.world.num_pes() {
            return Err(PgasError::InvalidPe {
                pe,
                num_pes: p.world.num_pes(),
            }
            .into());
        }
        let o = p.world.object(host, obj)?;
        Ok(p.world.element_dpa(&o, offset, len)?)
    }

    fn barrier_arrive(&mut self, host: HostId, now: u64) -> Result<Exec, OpError> {
        let p = self.pgas()?;
        p.world.ensure_initialized(host)?;
        let flag = p.world.arrival_flag_dpa(host);
        let gen_word = p.world.generation_word_dpa();
        let generation = p.generation;
        self.device_cas(flag, 0, 1, now)?;
        let p = self.pgas()?;
        p.arrived.push(host);
        let num_pes = p.world.num_pes();
        let note = format!("arrive;generation={generation};arrived={}", p.arrived.len());
        if p.arrived.len() == num_pes {
            let flags: Vec<u64> = (0..num_pes)
                .map(|pe| p.world.arrival_flag_dpa(pe))
                .collect();
            p.arrived.clear();
            p.generation += 1;
            for f in flags {
                self.device_cas(f, 1, 0, now)?;
            }
            self.device_cas(
                gen_word,
                stamp_generation(generation),
                stamp_generation(generation + 1),
                now,
            )?;
            for pe in 0..num_pes {
                self.queue
                    .schedule(
                        now + self.latency.atomic_ns,
                        Payload::BarrierExit {
                            pe,
                            generation: generation + 1,
                        },
                    )
                    .map_err(|e| OpError::Other(e.to_string()))?;
            }
        }
        Ok(Exec {
            step: Step::Blocked(Stuck::Barrier),
            addr: Some(flag),
            region: Some(self.device.config().region_of(flag)),
            extra: note,
        })
    }

    fn barrier_exit(&mut self, pe: PeId, generation: u64, now: u64) -> Result<(), EngineError> {
        let flushed = self.flush_heap(pe).unwrap_or(0);
        self.record(
            now,
            EventKind::Barrier,
            Some(pe),
            None,
            None,
            format!("exit;generation={generation};flushed={flushed}"),
        );
        if self.hosts[pe].blocked == Some(Stuck::Barrier) {
            self.hosts[pe].blocked = None;
            self.schedule_next(pe, now)?;
        }
        Ok(())
    }

    fn deliver_grant(&mut self, notice: GrantNotice, now: u64) -> Result<(), EngineError> {
        let host = notice.key.host;
        let wait = notice.wait_ns();
        self.metrics.grants_total += 1;
        self.metrics
            .lock_waits
            .entry(notice.region)
            .or_default()
            .push(wait);
        self.record(
            now,
            EventKind::GrantDeliver,
            Some(host),
            None,
            Some(notice.region),
            format!("app={};wait_ns={wait}", notice.key.app),
        );
        let expected = Stuck::Grant {
            app: notice.key.app,
            region: notice.region,
        };
        if self.hosts[host].blocked == Some(expected) {
            self.hosts[host].blocked = None;
            self.schedule_next(host, now)?;
        }
        Ok(())
    }

    fn deliver_snoop(&mut self, snoop: BiSnoop, now: u64) {
        self.metrics.bi_snoops_total += 1;
        let class = match snoop.class {
            SnoopClass::Necessary => "necessary",
            SnoopClass::Unnecessary => {
                self.metrics.bi_snoops_unnecessary += 1;
                "unnecessary"
            }
        };
        let addr = snoop.line_dpa();
        self.record(
            now,
            EventKind::BiSnoopDeliver,
            Some(snoop.target),
            Some(addr),
            Some(self.device.config().region_of(addr)),
            format!("class={class};issued_at={}", snoop.issued_at),
        );
    }
}
