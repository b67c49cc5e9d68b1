use serde::{Serialize, Serializer};

use super::EventKind;

pub const TRACE_COLUMNS: [&str; 8] = [
    "time_ns", "seq", "kind", "host", "port", "addr_hex", "region", "extra",
];

fn kind_name<S: Serializer>(k: &EventKind, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(k.name())
}

fn opt_hex<S: Serializer>(a: &Option<u64>, s: S) -> Result<S::Ok, S::Error> {
    match a {
        Some(a) => s.serialize_str(&format!("{a:#x}")),
        None => s.serialize_str(""),
    }
}

/// One dispatched event. `extra` holds `key=value` pairs joined by `;`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    pub time_ns: u64,
    pub seq: u64,
    #[serde(serialize_with = "kind_name")]
    pub kind: EventKind,
    pub host: Option<usize>,
    pub port: Option<usize>,
    #[serde(rename = "addr_hex", serialize_with = "opt_hex")]
    pub addr: Option<u64>,
    pub region: Option<usize>,
    pub extra: String,
}
