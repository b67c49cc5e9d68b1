use serde::{Deserialize, Serialize};

use super::EventKind;

/// Fixed per-operation latencies in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyModel {
    pub local_read_ns: u64,
    /// Added to every device memory access on top of `local_read_ns`.
    pub cxl_extra_ns: u64,
    /// Invented constant; no measured value exists.
    pub bi_snoop_ns: u64,
    pub atomic_ns: u64,
    pub cache_hit_ns: u64,
    /// Permits `cxl_extra_ns` outside the 50..=100 ns band.
    pub allow_out_of_band: bool,
}

pub const CXL_EXTRA_BAND: std::ops::RangeInclusive<u64> = 50..=100;

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            local_read_ns: 100,
            cxl_extra_ns: 75,
            bi_snoop_ns: 150,
            atomic_ns: 200,
            cache_hit_ns: 10,
            allow_out_of_band: false,
        }
    }
}

impl LatencyModel {
    /// Returns `(field, reason)` for every violated constraint.
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        for (name, v) in [
            ("local_read_ns", self.local_read_ns),
            ("cxl_extra_ns", self.cxl_extra_ns),
            ("bi_snoop_ns", self.bi_snoop_ns),
            ("atomic_ns", self.atomic_ns),
            ("cache_hit_ns", self.cache_hit_ns),
        ] {
            if v == 0 {
                out.push((name, "must be positive".to_string()));
            }
        }
        if !self.allow_out_of_band && !CXL_EXTRA_BAND.contains(&self.cxl_extra_ns) {
            out.push((
                "cxl_extra_ns",
                format!(
                    "{} lies outside 50..=100 ns; set allow_out_of_band = true to use it",
                    self.cxl_extra_ns
                ),
            ));
        }
        out
    }

    pub fn device_access_ns(&self) -> u64 {
        self.local_read_ns + self.cxl_extra_ns
    }

    pub fn access_latency(&self, kind: EventKind, cache_hit: bool) -> u64 {
        if cache_hit {
            return self.cache_hit_ns;
        }
        match kind {
            EventKind::HostRead | EventKind::HostWrite => self.device_access_ns(),
            EventKind::AtomicOp | EventKind::GrantDeliver | EventKind::Barrier => self.atomic_ns,
            EventKind::BiSnoopDeliver => self.bi_snoop_ns,
            EventKind::Fence
            | EventKind::AppArrive
            | EventKind::AppDepart
            | EventKind::Collective => self.cache_hit_ns,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let m = LatencyModel::default();
        assert_eq!(m.access_latency(EventKind::HostRead, true), 10);
        assert_eq!(m.access_latency(EventKind::HostRead, false), 175);
        assert_eq!(m.access_latency(EventKind::HostWrite, false), 175);
        assert_eq!(m.access_latency(EventKind::AtomicOp, false), 200);
        assert_eq!(m.access_latency(EventKind::BiSnoopDeliver, false), 150);
        assert!(m.problems().is_empty());
    }

    #[test]
    fn band_enforced_unless_overridden() {
        let mut m = LatencyModel {
            cxl_extra_ns: 120,
            ..LatencyModel::default()
        };
        assert_eq!(m.problems().len(), 1);
        m.allow_out_of_band = true;
        assert!(m.problems().is_empty());
        m.atomic_ns = 0;
        assert_eq!(m.problems()[0].0, "atomic_ns");
    }
}
