//! Workload traces: one operation per line.
//!
//! ```text
//! # comment
//! t=0   host=0 register app=1
//! t=0   host=0 map app=1 region=0 perm=rw
//! t=100 host=0 acquire app=1 region=0
//! t=100 host=0 write addr=0x40 data=deadbeef
//! t=100 host=0 release app=1 region=0
//! t=300 host=1 read addr=0x40 len=4
//! ```
//!
//! Numbers may be decimal or `0x` hex. Addresses are host physical
//! addresses as seen through the issuing host's port. Region arguments
//! accept either `region=<index>` or `addr=<hpa>` (the lock region holding
//! that address).

mod generate;

pub use generate::{generate_workload, generate_workload_for, InterArrival, WorkloadSpec};

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::driver::{AppId, Permission};
use crate::units::parse_u64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorkloadError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("operation {index} at t={time} is earlier than its predecessor at t={previous}")]
    Unsorted {
        index: usize,
        time: u64,
        previous: u64,
    },

    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegionRef {
    Index(usize),
    Addr(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Verb {
    Read {
        addr: u64,
        len: u64,
    },
    Write {
        addr: u64,
        data: Vec<u8>,
    },
    /// Device-side compare-and-swap on an 8-byte HDM word.
    Amo {
        addr: u64,
        expected: u64,
        new: u64,
    },
    MmioTas {
        lock: usize,
    },
    MmioCas {
        lock: usize,
        expected: u64,
        new: u64,
    },

    Register {
        app: AppId,
    },
    Map {
        app: AppId,
        target: RegionRef,
        perm: Permission,
    },
    Acquire {
        app: AppId,
        target: RegionRef,
    },
    Release {
        app: AppId,
        target: RegionRef,
    },
    Unregister {
        app: AppId,
    },

    Init,
    Alloc {
        size: u64,
        align: u64,
    },
    Put {
        obj: usize,
        pe: usize,
        offset: u64,
        data: Vec<u8>,
    },
    Get {
        obj: usize,
        pe: usize,
        offset: u64,
        len: u64,
    },
    Fence,
    Barrier,
    Cas {
        obj: usize,
        offset: u64,
        expected: u64,
        new: u64,
    },
}

impl Verb {
    pub fn name(&self) -> &'static str {
        match self {
            Verb::Read { .. } => "read",
            Verb::Write { .. } => "write",
            Verb::Amo { .. } => "amo",
            Verb::MmioTas { .. } => "mmio-tas",
            Verb::MmioCas { .. } => "mmio-cas",
            Verb::Register { .. } => "register",
            Verb::Map { .. } => "map",
            Verb::Acquire { .. } => "acquire",
            Verb::Release { .. } => "release",
            Verb::Unregister { .. } => "unregister",
            Verb::Init => "init",
            Verb::Alloc { .. } => "alloc",
            Verb::Put { .. } => "put",
            Verb::Get { .. } => "get",
            Verb::Fence => "fence",
            Verb::Barrier => "barrier",
            Verb::Cas { .. } => "cas",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Op {
    pub time: u64,
    pub host: usize,
    pub verb: Verb,
}

impl Op {
    pub fn new(time: u64, host: usize, verb: Verb) -> Self {
        Self { time, host, verb }
    }
}

fn fmt_target(f: &mut fmt::Formatter<'_>, target: &RegionRef) -> fmt::Result {
    match target {
        RegionRef::Index(i) => write!(f, " region={i}"),
        RegionRef::Addr(a) => write!(f, " addr={a:#x}"),
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t={} host={} {}", self.time, self.host, self.verb.name())?;
        match &self.verb {
            Verb::Read { addr, len } => write!(f, " addr={addr:#x} len={len}"),
            Verb::Write { addr, data } => write!(f, " addr={addr:#x} data={}", hex::encode(data)),
            Verb::Amo {
                addr,
                expected,
                new,
            } => {
                write!(f, " addr={addr:#x} expected={expected} new={new}")
            }
            Verb::MmioTas { lock } => write!(f, " lock={lock}"),
            Verb::MmioCas {
                lock,
                expected,
                new,
            } => {
                write!(f, " lock={lock} expected={expected} new={new}")
            }
            Verb::Register { app } | Verb::Unregister { app } => write!(f, " app={app}"),
            Verb::Map { app, target, perm } => {
                write!(f, " app={app}")?;
                fmt_target(f, target)?;
                let p = match perm {
                    Permission::ReadOnly => "ro",
                    Permission::ReadWrite => "rw",
                };
                write!(f, " perm={p}")
            }
            Verb::Acquire { app, target } | Verb::Release { app, target } => {
                write!(f, " app={app}")?;
                fmt_target(f, target)
            }
            Verb::Init | Verb::Fence | Verb::Barrier => Ok(()),
            Verb::Alloc { size, align } => write!(f, " size={size} align={align}"),
            Verb::Put {
                obj,
                pe,
                offset,
                data,
            } => write!(
                f,
                " obj={obj} pe={pe} off={offset} data={}",
                hex::encode(data)
            ),
            Verb::Get {
                obj,
                pe,
                offset,
                len,
            } => write!(f, " obj={obj} pe={pe} off={offset} len={len}"),
            Verb::Cas {
                obj,
                offset,
                expected,
                new,
            } => write!(f, " obj={obj} off={offset} expected={expected} new={new}"),
        }
    }
}

struct Args<'a> {
    pairs: Vec<(&'a str, &'a str)>,
}

impl<'a> Args<'a> {
    fn parse(tokens: &[&'a str]) -> Result<Self, String> {
        let mut pairs = Vec::new();
        for tok in tokens {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got {tok:?}"))?;
            if pairs.iter().any(|(pk, _)| *pk == k) {
                return Err(format!("duplicate argument {k:?}"));
            }
            pairs.push((k, v));
        }
        Ok(Self { pairs })
    }

    fn take(&mut self, key: &str) -> Option<&'a str> {
        let pos = self.pairs.iter().position(|(k, _)| *k == key)?;
        Some(self.pairs.remove(pos).1)
    }

    fn num(&mut self, key: &str) -> Result<u64, String> {
        let v = self.take(key).ok_or_else(|| format!("missing {key}="))?;
        parse_u64(v)
    }

    fn num_or(&mut self, key: &str, default: u64) -> Result<u64, String> {
        match self.take(key) {
            Some(v) => parse_u64(v),
            None => Ok(default),
        }
    }

    fn index(&mut self, key: &str) -> Result<usize, String> {
        usize::try_from(self.num(key)?).map_err(|e| e.to_string())
    }

    fn bytes(&mut self, key: &str) -> Result<Vec<u8>, String> {
        let v = self.take(key).ok_or_else(|| format!("missing {key}="))?;
        let v = v.strip_prefix("0x").unwrap_or(v);
        hex::decode(v).map_err(|e| format!("bad hex data: {e}"))
    }

    fn target(&mut self) -> Result<RegionRef, String> {
        match (self.take("region"), self.take("addr")) {
            (Some(r), None) => Ok(RegionRef::Index(parse_u64(r)? as usize)),
            (None, Some(a)) => Ok(RegionRef::Addr(parse_u64(a)?)),
            _ => Err("expected exactly one of region= or addr=".into()),
        }
    }

    fn finish(self) -> Result<(), String> {
        match self.pairs.first() {
            None => Ok(()),
            Some((k, _)) => Err(format!("unexpected argument {k:?}")),
        }
    }
}

impl FromStr for Op {
    type Err = String;

    fn from_str(line: &str) -> Result<Self, String> {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() < 3 {
            return Err("expected `t=<ns> host=<k> <verb> ...`".into());
        }
        let time = tokens[0]
            .strip_prefix("t=")
            .ok_or("first field must be t=<ns>")
            .and_then(|v| parse_u64(v).map_err(|_| "bad time"))?;
        let host = tokens[1]
            .strip_prefix("host=")
            .ok_or("second field must be host=<k>")
            .and_then(|v| parse_u64(v).map_err(|_| "bad host"))? as usize;
        let mut a = Args::parse(&tokens[3..])?;
        let verb = match tokens[2] {
            "read" => Verb::Read {
                addr: a.num("addr")?,
                len: a.num("len")?,
            },
            "write" => Verb::Write {
                addr: a.num("addr")?,
                data: a.bytes("data")?,
            },
            "amo" => Verb::Amo {
                addr: a.num("addr")?,
                expected: a.num("expected")?,
                new: a.num("new")?,
            },
            "mmio-tas" => Verb::MmioTas {
                lock: a.index("lock")?,
            },
            "mmio-cas" => Verb::MmioCas {
                lock: a.index("lock")?,
                expected: a.num("expected")?,
                new: a.num("new")?,
            },
            "register" => Verb::Register { app: a.num("app")? },
            "unregister" => Verb::Unregister { app: a.num("app")? },
            "map" => {
                let app = a.num("app")?;
                let target = a.target()?;
                let perm = match a.take("perm").unwrap_or("rw") {
                    "rw" => Permission::ReadWrite,
                    "ro" => Permission::ReadOnly,
                    other => return Err(format!("perm must be rw or ro, got {other:?}")),
                };
                Verb::Map { app, target, perm }
            }
            "acquire" => Verb::Acquire {
                app: a.num("app")?,
                target: a.target()?,
            },
            "release" => Verb::Release {
                app: a.num("app")?,
                target: a.target()?,
            },
            "init" => Verb::Init,
            "alloc" => Verb::Alloc {
                size: a.num("size")?,
                align: a.num_or("align", 64)?,
            },
            "put" => Verb::Put {
                obj: a.index("obj")?,
                pe: a.index("pe")?,
                offset: a.num_or("off", 0)?,
                data: a.bytes("data")?,
            },
            "get" => Verb::Get {
                obj: a.index("obj")?,
                pe: a.index("pe")?,
                offset: a.num_or("off", 0)?,
                len: a.num("len")?,
            },
            "fence" => Verb::Fence,
            "barrier" => Verb::Barrier,
            "cas" => Verb::Cas {
                obj: a.index("obj")?,
                offset: a.num_or("off", 0)?,
                expected: a.num("expected")?,
                new: a.num("new")?,
            },
            other => return Err(format!("unknown verb {other:?}")),
        };
        a.finish()?;
        Ok(Op { time, host, verb })
    }
}

/// An ordered list of operations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Workload {
    pub ops: Vec<Op>,
}

impl Workload {
    pub fn new(ops: Vec<Op>) -> Self {
        Self { ops }
    }

    pub fn parse(text: &str) -> Result<Self, WorkloadError> {
        let mut ops = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let op = line.parse().map_err(|message| WorkloadError::Parse {
                line: i + 1,
                message,
            })?;
            ops.push(op);
        }
        Ok(Self { ops })
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Checks issue times never decrease.
    pub fn check_sorted(&self) -> Result<(), WorkloadError> {
        for (index, pair) in self.ops.windows(2).enumerate() {
            if pair[1].time < pair[0].time {
                return Err(WorkloadError::Unsorted {
                    index: index + 1,
                    time: pair[1].time,
                    previous: pair[0].time,
                });
            }
        }
        Ok(())
    }

    pub fn max_host(&self) -> Option<usize> {
        self.ops.iter().map(|o| o.host).max()
    }
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for op in &self.ops {
            writeln!(f, "{op}")?;
        }
        Ok(())
    }
}
