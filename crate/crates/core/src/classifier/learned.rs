/// Learned index over sorted, non-overlapping intervals in one field.
///
/// A root linear model routes a value to a segment; each segment has its own
/// least-squares model with a recorded maximum error. Lookups search only the
/// error window and fall back to a full binary search if the window result
/// does not verify, so a lookup is always exact.
#[derive(Debug, Clone)]
pub struct LearnedIndex {
    lo: Vec<u32>,
    hi: Vec<u32>,
    payload: Vec<u32>,
    root: Linear,
    segments: Vec<Segment>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Linear {
    slope: f64,
    intercept: f64,
}

impl Linear {
    fn fit(xs: &[u32], first_pos: usize) -> Linear {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return Linear::default();
        }
        let mx = xs.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
        let my = first_pos as f64 + (n - 1.0) / 2.0;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for (i, &x) in xs.iter().enumerate() {
            let dx = f64::from(x) - mx;
            sxy += dx * ((first_pos + i) as f64 - my);
            sxx += dx * dx;
        }
        let slope = if sxx > 0.0 { (sxy / sxx).max(0.0) } else { 0.0 };
        Linear { slope, intercept: my - slope * mx }
    }

    fn predict(&self, x: u32) -> f64 {
        self.slope * f64::from(x) + self.intercept
    }
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    start: usize,
    end: usize,
    model: Linear,
    max_err: usize,
}

const KEYS_PER_SEGMENT: usize = 64;

impl LearnedIndex {
    /// `intervals` are `(lo, hi, payload)`; they must not overlap.
    pub fn build(mut intervals: Vec<(u32, u32, u32)>) -> LearnedIndex {
        intervals.sort_unstable();
        debug_assert!(intervals.windows(2).all(|w| w[0].1 < w[1].0), "intervals overlap");
        let lo: Vec<u32> = intervals.iter().map(|i| i.0).collect();
        let hi = intervals.iter().map(|i| i.1).collect();
        let payload = intervals.iter().map(|i| i.2).collect();
        let n = lo.len();
        let nseg = n.div_ceil(KEYS_PER_SEGMENT).max(1);
        let root = Linear::fit(&lo, 0);

        let mut idx = LearnedIndex { lo, hi, payload, root, segments: Vec::with_capacity(nseg) };
        // the root model is monotone, so routed keys form contiguous runs
        let mut start = 0;
        for s in 0..nseg {
            let mut end = start;
            while end < n && idx.route_raw(idx.lo[end], nseg) == s {
                end += 1;
            }
            let keys = &idx.lo[start..end];
            let model = Linear::fit(keys, start);
            let max_err = keys
                .iter()
                .enumerate()
                .map(|(i, &k)| (model.predict(k) - (start + i) as f64).abs().ceil() as usize)
                .max()
                .unwrap_or(0);
            idx.segments.push(Segment { start, end, model, max_err });
            start = end;
        }
        debug_assert_eq!(start, n);
        idx
    }

    fn route_raw(&self, v: u32, nseg: usize) -> usize {
        let n = self.lo.len().max(1) as f64;
        let p = self.root.predict(v) * nseg as f64 / n;
        (p.max(0.0) as usize).min(nseg - 1)
    }

    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }

    /// Largest per-segment error bound.
    pub fn max_error(&self) -> usize {
        self.segments.iter().map(|s| s.max_err).max().unwrap_or(0)
    }

    /// Index of the last interval whose start is `<= v`.
    fn floor_index(&self, v: u32) -> Option<usize> {
        let n = self.lo.len();
        if n == 0 || v < self.lo[0] {
            return None;
        }
        let seg = &self.segments[self.route_raw(v, self.segments.len())];
        if seg.end > seg.start {
            let p = seg.model.predict(v).round().max(0.0) as usize;
            let w = seg.max_err + 1;
            let a = p.saturating_sub(w).max(seg.start);
            let b = (p + w + 1).min(seg.end);
            if a < b {
                let i = a + self.lo[a..b].partition_point(|&x| x <= v);
                if i > 0 {
                    let i = i - 1;
                    if self.lo[i] <= v && (i + 1 == n || self.lo[i + 1] > v) {
                        return Some(i);
                    }
                }
            }
        }
        Some(self.lo.partition_point(|&x| x <= v) - 1)
    }

    /// Payload of the interval containing `v`, if any.
    pub fn lookup(&self, v: u32) -> Option<u32> {
        let i = self.floor_index(v)?;
        (v <= self.hi[i]).then_some(self.payload[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn oracle(iv: &[(u32, u32, u32)], v: u32) -> Option<u32> {
        iv.iter().find(|&&(lo, hi, _)| lo <= v && v <= hi).map(|i| i.2)
    }

    #[test]
    fn empty_index() {
        let idx = LearnedIndex::build(Vec::new());
        assert_eq!(idx.lookup(7), None);
    }

    #[test]
    fn skewed_keys() {
        // dense cluster plus sparse tail stresses the error bounds
        let mut iv: Vec<(u32, u32, u32)> = (0..500u32).map(|i| (i * 4, i * 4 + 1, i)).collect();
        iv.extend((0..200u32).map(|i| (1_000_000 + i * 1_000_000, 1_000_000 + i * 1_000_000 + 10, 500 + i)));
        let idx = LearnedIndex::build(iv.clone());
        for v in (0..2100).chain([999_999, 1_000_000, 1_000_005, 1_000_011, 200_000_010, u32::MAX]) {
            assert_eq!(idx.lookup(v), oracle(&iv, v), "v={v}");
        }
    }

    proptest! {
        #[test]
        fn matches_linear_scan(starts in proptest::collection::btree_set(any::<u32>(), 1..400),
                               widths in proptest::collection::vec(0u32..1000, 400),
                               probes in proptest::collection::vec(any::<u32>(), 50)) {
            let starts: Vec<u32> = starts.into_iter().collect();
            let mut iv = Vec::new();
            for (i, &s) in starts.iter().enumerate() {
                let next = starts.get(i + 1).copied().unwrap_or(u32::MAX);
                let hi = s.saturating_add(widths[i]).min(next.saturating_sub(1).max(s));
                if i + 1 < starts.len() && hi >= next { continue; }
                iv.push((s, hi, i as u32));
            }
            let idx = LearnedIndex::build(iv.clone());
            for &v in probes.iter().chain(starts.iter()) {
                prop_assert_eq!(idx.lookup(v), oracle(&iv, v));
            }
        }
    }
}
