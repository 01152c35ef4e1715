use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::time::VirtualTime;
use super::SimError;

/// Exact percentile summary of a latency sample set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: u64,
    pub drop_count: u64,
    pub mean_ns: f64,
    pub p50_ns: u64,
    pub p99_ns: u64,
    pub max_ns: u64,
}

impl LatencyStats {
    pub fn from_samples(samples: &[u64], drop_count: u64) -> Self {
        if samples.is_empty() {
            return LatencyStats { drop_count, ..Default::default() };
        }
        let mut sorted = samples.to_vec();
        sorted.sort_unstable();
        let sum: u128 = sorted.iter().map(|&s| u128::from(s)).sum();
        LatencyStats {
            count: sorted.len() as u64,
            drop_count,
            mean_ns: sum as f64 / sorted.len() as f64,
            p50_ns: nearest_rank(&sorted, 50),
            p99_ns: nearest_rank(&sorted, 99),
            max_ns: *sorted.last().unwrap(),
        }
    }
}

/// Nearest-rank percentile over a sorted, non-empty slice.
pub fn nearest_rank(sorted: &[u64], pct: u64) -> u64 {
    let n = sorted.len() as u64;
    let rank = (pct * n).div_ceil(100).max(1);
    sorted[(rank - 1) as usize]
}

/// Labelled latency samples and drop counters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsSink {
    samples: BTreeMap<String, Vec<u64>>,
    drops: BTreeMap<String, u64>,
}

impl StatsSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_latency(&mut self, label: &str, start: VirtualTime, end: VirtualTime) -> Result<(), SimError> {
        let d = end.checked_sub(start).ok_or(SimError::NegativeLatency { start, end })?;
        self.record_sample(label, d.as_nanos());
        Ok(())
    }

    pub fn record_sample(&mut self, label: &str, ns: u64) {
        self.samples.entry(label.to_string()).or_default().push(ns);
    }

    pub fn record_drop(&mut self, label: &str) {
        *self.drops.entry(label.to_string()).or_default() += 1;
    }

    pub fn samples(&self, label: &str) -> &[u64] {
        self.samples.get(label).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn drops(&self, label: &str) -> u64 {
        self.drops.get(label).copied().unwrap_or(0)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.samples.keys().chain(self.drops.keys().filter(|k| !self.samples.contains_key(*k))).map(String::as_str)
    }

    pub fn summary(&self, label: &str) -> LatencyStats {
        LatencyStats::from_samples(self.samples(label), self.drops(label))
    }

    pub fn clear(&mut self) {
        self.samples.clear();
        self.drops.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(ns: u64) -> VirtualTime {
        VirtualTime::from_nanos(ns)
    }

    #[test]
    fn small_set_percentiles() {
        let mut sink = StatsSink::new();
        for s in [300, 100, 200] {
            sink.record_latency("x", t(0), t(s)).unwrap();
        }
        let st = sink.summary("x");
        assert_eq!(st.p50_ns, 200);
        assert_eq!(st.max_ns, 300);
        assert_eq!(st.count, 3);
    }

    #[test]
    fn single_sample() {
        let st = LatencyStats::from_samples(&[1880], 0);
        assert_eq!((st.p50_ns, st.p99_ns, st.max_ns), (1880, 1880, 1880));
    }

    #[test]
    fn constant_distribution() {
        let mut sink = StatsSink::new();
        for i in 0..10_000u64 {
            sink.record_latency("c", t(i * 1000), t(i * 1000 + 386)).unwrap();
        }
        let st = sink.summary("c");
        assert_eq!(st.mean_ns, 386.0);
        assert_eq!(st.p99_ns, 386);
    }

    #[test]
    fn end_before_start_is_an_error() {
        let mut sink = StatsSink::new();
        assert!(matches!(sink.record_latency("x", t(10), t(5)), Err(SimError::NegativeLatency { .. })));
        assert!(sink.samples("x").is_empty());
    }

    #[test]
    fn empty_summary_keeps_drops() {
        let mut sink = StatsSink::new();
        sink.record_drop("q");
        let st = sink.summary("q");
        assert_eq!((st.count, st.drop_count), (0, 1));
    }
}
