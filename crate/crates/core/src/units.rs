//! Integer parsing shared by the config file and the workload grammar.
//!
//! Accepts plain decimal, `0x` hex, `_` separators and binary size suffixes
//! (`KiB`, `MiB`, `GiB`, `TiB`).

use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

pub fn parse_u64(text: &str) -> Result<u64, String> {
    let t = text.trim().replace('_', "");
    if let Some(hex) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        return u64::from_str_radix(hex, 16).map_err(|e| format!("bad hex number {text:?}: {e}"));
    }
    let suffixes = [("KiB", 10), ("MiB", 20), ("GiB", 30), ("TiB", 40)];
    for (suffix, shift) in suffixes {
        if let Some(n) = t.strip_suffix(suffix) {
            let n: u64 = n
                .trim()
                .parse()
                .map_err(|e| format!("bad size {text:?}: {e}"))?;
            return n
                .checked_mul(1 << shift)
                .ok_or_else(|| format!("size {text:?} overflows"));
        }
    }
    t.parse().map_err(|e| format!("bad number {text:?}: {e}"))
}

struct FlexVisitor;

impl Visitor<'_> for FlexVisitor {
    type Value = u64;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("a non-negative integer, a 0x-prefixed hex string or a size like \"64MiB\"")
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<u64, E> {
        Ok(v)
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<u64, E> {
        u64::try_from(v).map_err(|_| E::custom(format!("negative value {v}")))
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<u64, E> {
        parse_u64(v).map_err(E::custom)
    }
}

pub fn deserialize_flex<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
    d.deserialize_any(FlexVisitor)
}

/// Flexible input, written back as a plain integer. Values beyond the signed
/// 64-bit range (which TOML cannot hold) are written as `0x` strings.
pub mod flex {
    pub use super::deserialize_flex as deserialize;

    pub fn serialize<S: serde::Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        match i64::try_from(*v) {
            Ok(i) => s.serialize_i64(i),
            Err(_) => s.serialize_str(&format!("{v:#x}")),
        }
    }
}

/// Flexible input, written back as a `0x` string. Used for addresses.
pub mod hex_addr {
    pub use super::deserialize_flex as deserialize;

    pub fn serialize<S: serde::Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:#x}"))
    }
}

/// An address-like number that reads flexibly and writes as `0x` hex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Hex(#[serde(with = "hex_addr")] pub u64);

impl From<u64> for Hex {
    fn from(v: u64) -> Self {
        Hex(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_forms() {
        assert_eq!(parse_u64("4096").unwrap(), 4096);
        assert_eq!(parse_u64("0x1000").unwrap(), 4096);
        assert_eq!(parse_u64("0x1000_0000").unwrap(), 0x1000_0000);
        assert_eq!(parse_u64("64MiB").unwrap(), 64 << 20);
        assert_eq!(parse_u64("2 KiB").unwrap(), 2048);
        assert!(parse_u64("-3").is_err());
        assert!(parse_u64("0xzz").is_err());
    }
}
