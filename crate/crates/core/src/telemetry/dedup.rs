use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::{FlowKey, IntReport};

pub const DEFAULT_DEDUP_WINDOW: usize = 1024;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportStreamStats {
    pub reports_in: u64,
    pub duplicates_removed: u64,
    pub coalesced: u64,
    pub reports_out: u64,
}

/// Removes and merges reports sharing a `(flow, seq)` key within a bounded window.
///
/// The window holds the most recent `window` distinct keys in first-arrival
/// order. A hit does not refresh a key's position, which makes the
/// transformation idempotent.
#[derive(Debug, Clone)]
pub struct Deduplicator {
    window: usize,
    recent: VecDeque<(FlowKey, u64)>,
    slot: HashMap<(FlowKey, u64), usize>,
    out: Vec<IntReport>,
    stats: ReportStreamStats,
}

impl Deduplicator {
    pub fn new(window: usize) -> Self {
        assert!(window >= 1, "dedup window must be at least 1");
        Deduplicator {
            window,
            recent: VecDeque::with_capacity(window),
            slot: HashMap::with_capacity(window),
            out: Vec::new(),
            stats: ReportStreamStats::default(),
        }
    }

    pub fn push(&mut self, report: IntReport) {
        self.stats.reports_in += 1;
        let key = (report.flow, report.seq);
        if let Some(&idx) = self.slot.get(&key) {
            if merge_into(&mut self.out[idx], &report) {
                self.stats.coalesced += 1;
            } else {
                self.stats.duplicates_removed += 1;
            }
            return;
        }
        if self.recent.len() == self.window {
            if let Some(old) = self.recent.pop_front() {
                self.slot.remove(&old);
            }
        }
        self.recent.push_back(key);
        self.slot.insert(key, self.out.len());
        self.out.push(report);
        self.stats.reports_out += 1;
    }

    pub fn stats(&self) -> ReportStreamStats {
        self.stats
    }

    pub fn finish(self) -> (Vec<IntReport>, ReportStreamStats) {
        (self.out, self.stats)
    }
}

/// Union `extra`'s hops into `base`, ordered by timestamp. Returns false if nothing new was added.
fn merge_into(base: &mut IntReport, extra: &IntReport) -> bool {
    let new_hops: Vec<_> = extra.hops.iter().filter(|h| !base.hops.contains(h)).copied().collect();
    let adopt_drop = base.drop.is_none() && extra.drop.is_some();
    if new_hops.is_empty() && !adopt_drop {
        return false;
    }
    let base_drop_hop = base.drop.map(|d| (base.hops[d.hop_index], d.reason));
    let extra_drop_hop = extra.drop.map(|d| (extra.hops[d.hop_index], d.reason));
    base.hops.extend(new_hops);
    base.hops.sort();
    base.hops.sort_by_key(|h| h.timestamp_ns);
    if let Some((hop, reason)) = base_drop_hop.or(extra_drop_hop) {
        let hop_index = base.hops.iter().position(|h| *h == hop).expect("dropped hop is retained in the union");
        base.drop = Some(super::DropInfo { hop_index, reason });
    }
    true
}

/// Batch form of [`Deduplicator`]: output preserves first-arrival order.
pub fn dedup_coalesce(
    reports: impl IntoIterator<Item = IntReport>,
    window: usize,
) -> (Vec<IntReport>, ReportStreamStats) {
    let mut d = Deduplicator::new(window);
    for r in reports {
        d.push(r);
    }
    d.finish()
}
