use std::collections::BTreeMap;

use serde::Serialize;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct HostCounts {
    pub reads: u64,
    pub writes: u64,
    pub atomics: u64,
}

/// A number in the flat metrics document.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(untagged)]
pub enum MetricValue {
    Int(u64),
    Float(f64),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub bi_snoops_total: u64,
    pub bi_snoops_unnecessary: u64,
    pub protocol_violations: u64,
    pub zeroized_bytes: u64,
    pub stale_reads: u64,
    /// Operations rejected by the device, driver or PGAS layer.
    pub op_errors: u64,
    pub not_holder_errors: u64,
    pub grants_total: u64,
    /// Wait samples in ns per region, one per grant.
    pub lock_waits: BTreeMap<usize, Vec<u64>>,
    pub per_host: Vec<HostCounts>,
    pub directory_metadata_bytes: u64,
    pub total_time_ns: u64,
}

/// Nearest-rank percentile of an ascending slice; 0 when empty.
pub fn percentile(sorted: &[u64], pct: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl Metrics {
    pub fn new(num_hosts: usize) -> Self {
        Self {
            per_host: vec![HostCounts::default(); num_hosts],
            ..Self::default()
        }
    }

    pub fn all_waits(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.lock_waits.values().flatten().copied().collect();
        v.sort_unstable();
        v
    }

    pub fn wait_sample_count(&self) -> u64 {
        self.lock_waits.values().map(|v| v.len() as u64).sum()
    }

    pub fn mean_wait_ns(&self) -> f64 {
        let all = self.all_waits();
        if all.is_empty() {
            0.0
        } else {
            all.iter().sum::<u64>() as f64 / all.len() as f64
        }
    }

    pub fn p99_wait_ns(&self) -> u64 {
        percentile(&self.all_waits(), 99.0)
    }

    pub fn totals(&self) -> HostCounts {
        self.per_host
            .iter()
            .fold(HostCounts::default(), |a, h| HostCounts {
                reads: a.reads + h.reads,
                writes: a.writes + h.writes,
                atomics: a.atomics + h.atomics,
            })
    }

    /// Flat key to number map, sorted by key.
    pub fn flat(&self) -> BTreeMap<String, MetricValue> {
        use MetricValue::{Float, Int};
        let mut m = BTreeMap::new();
        let mut put = |k: String, v: MetricValue| {
            m.insert(k, v);
        };
        put("bi_snoops_total".into(), Int(self.bi_snoops_total));
        put(
            "bi_snoops_unnecessary".into(),
            Int(self.bi_snoops_unnecessary),
        );
        put("protocol_violations".into(), Int(self.protocol_violations));
        put("zeroized_bytes".into(), Int(self.zeroized_bytes));
        put("stale_reads".into(), Int(self.stale_reads));
        put("op_errors".into(), Int(self.op_errors));
        put("not_holder_errors".into(), Int(self.not_holder_errors));
        put("grants_total".into(), Int(self.grants_total));
        put(
            "directory_metadata_bytes".into(),
            Int(self.directory_metadata_bytes),
        );
        put("total_time_ns".into(), Int(self.total_time_ns));
        put("lock_wait_samples".into(), Int(self.wait_sample_count()));
        put("lock_wait_mean_ns".into(), Float(self.mean_wait_ns()));
        put("lock_wait_p99_ns".into(), Int(self.p99_wait_ns()));
        for (region, samples) in &self.lock_waits {
            let sum: u64 = samples.iter().sum();
            put(
                format!("lock_wait.region_{region}.samples"),
                Int(samples.len() as u64),
            );
            put(format!("lock_wait.region_{region}.total_ns"), Int(sum));
        }
        let t = self.totals();
        put("reads".into(), Int(t.reads));
        put("writes".into(), Int(t.writes));
        put("atomics".into(), Int(t.atomics));
        for (h, c) in self.per_host.iter().enumerate() {
            put(format!("host_{h}.reads"), Int(c.reads));
            put(format!("host_{h}.writes"), Int(c.writes));
            put(format!("host_{h}.atomics"), Int(c.atomics));
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 99.0), 99);
        assert_eq!(percentile(&v, 100.0), 100);
        assert_eq!(percentile(&[7], 99.0), 7);
        assert_eq!(percentile(&[], 99.0), 0);
    }

    #[test]
    fn wait_summaries() {
        let mut m = Metrics::new(2);
        m.lock_waits.insert(0, vec![0, 100]);
        m.lock_waits.insert(3, vec![200]);
        assert_eq!(m.wait_sample_count(), 3);
        assert_eq!(m.mean_wait_ns(), 100.0);
        assert_eq!(m.p99_wait_ns(), 200);
        let flat = m.flat();
        assert_eq!(flat["lock_wait.region_3.samples"], MetricValue::Int(1));
        assert_eq!(flat["host_1.reads"], MetricValue::Int(0));
    }
}
