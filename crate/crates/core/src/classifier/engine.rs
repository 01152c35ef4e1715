use serde::{Deserialize, Serialize};

use super::{ClassKey, ClassifierError, LearnedIndex, Rule, RuleSet, Schema, FIELD_COUNT};
use crate::telemetry::IntReport;

type Bounds = [(u32, u32); FIELD_COUNT];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    /// Stop splitting once a node holds at most this many rules.
    pub leaf_max_rules: usize,
    /// Pull a non-overlapping subset of rules into a learned index.
    pub use_learned_index: bool,
    /// Minimum subset size worth indexing.
    pub min_iset_rules: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig { leaf_max_rules: 16, use_learned_index: true, min_iset_rules: 32 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct EngineStats {
    pub rules: usize,
    pub iset_rules: usize,
    pub iset_field: Option<usize>,
    pub iset_max_error: usize,
    pub tree_rules: usize,
    pub tree_nodes: usize,
    pub leaves: usize,
    pub max_depth: usize,
    pub max_leaf_rules: usize,
    /// Rule references stored in leaves, counting replication.
    pub leaf_entries: usize,
}

#[derive(Debug, Clone, Copy)]
enum Node {
    Leaf { start: u32, len: u32 },
    Split { field: u8, point: u32, left: u32, right: u32 },
}

/// Decision-tree classifier with an optional learned-index side path.
///
/// Rules are kept in rank order (priority descending, id ascending), so the
/// best match is the one with the smallest rank.
#[derive(Debug, Clone)]
pub struct ClassifierEngine {
    schema: Schema,
    rules: Vec<Rule>,
    bounds: Vec<Bounds>,
    nodes: Vec<Node>,
    leaf_rules: Vec<u32>,
    iset: Option<(usize, LearnedIndex)>,
    stats: EngineStats,
}

const MAX_DEPTH: usize = 64;

struct Builder<'a> {
    bounds: &'a [Bounds],
    leaf_max: usize,
    budget: usize,
    nodes: Vec<Node>,
    leaf_rules: Vec<u32>,
    stats: EngineStats,
}

impl Builder<'_> {
    fn leaf(&mut self, ranks: &[u32], depth: usize) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node::Leaf { start: self.leaf_rules.len() as u32, len: ranks.len() as u32 });
        self.leaf_rules.extend_from_slice(ranks);
        self.stats.leaves += 1;
        self.stats.leaf_entries += ranks.len();
        self.stats.max_leaf_rules = self.stats.max_leaf_rules.max(ranks.len());
        self.stats.max_depth = self.stats.max_depth.max(depth);
        id
    }

    fn build(&mut self, mut ranks: Vec<u32>, region: Bounds, depth: usize) -> u32 {
        // a rule covering the whole region shadows everything ranked below it
        if let Some(p) = ranks.iter().position(|&r| covers(&self.bounds[r as usize], &region)) {
            ranks.truncate(p + 1);
        }
        if ranks.len() <= self.leaf_max || depth >= MAX_DEPTH || self.leaf_rules.len() > self.budget {
            return self.leaf(&ranks, depth);
        }
        let Some((field, point, nl, nr)) = self.best_split(&ranks, &region) else {
            return self.leaf(&ranks, depth);
        };
        if nl.max(nr) >= ranks.len() {
            return self.leaf(&ranks, depth);
        }
        let (left, right): (Vec<u32>, Vec<u32>) = {
            let l = ranks.iter().copied().filter(|&r| self.bounds[r as usize][field].0 < point).collect();
            let r = ranks.iter().copied().filter(|&r| self.bounds[r as usize][field].1 >= point).collect();
            (l, r)
        };
        drop(ranks);
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { start: 0, len: 0 });
        let mut lreg = region;
        lreg[field].1 = point - 1;
        let mut rreg = region;
        rreg[field].0 = point;
        let l = self.build(left, lreg, depth + 1);
        let r = self.build(right, rreg, depth + 1);
        self.nodes[id] = Node::Split { field: field as u8, point, left: l, right: r };
        id as u32
    }

    /// Median-endpoint split minimizing the larger child.
    fn best_split(&self, ranks: &[u32], region: &Bounds) -> Option<(usize, u32, usize, usize)> {
        let mut best: Option<(usize, usize, usize, u32, usize, usize)> = None;
        for f in 0..FIELD_COUNT {
            let (rlo, rhi) = region[f];
            let mut pts: Vec<u32> = Vec::with_capacity(ranks.len() * 2);
            for &r in ranks {
                let (lo, hi) = self.bounds[r as usize][f];
                if lo > rlo {
                    pts.push(lo);
                }
                if hi < rhi {
                    pts.push(hi + 1);
                }
            }
            if pts.is_empty() {
                continue;
            }
            pts.sort_unstable();
            pts.dedup();
            let point = pts[pts.len() / 2];
            let nl = ranks.iter().filter(|&&r| self.bounds[r as usize][f].0 < point).count();
            let nr = ranks.iter().filter(|&&r| self.bounds[r as usize][f].1 >= point).count();
            let score = (nl.max(nr), nl + nr);
            if best.is_none_or(|b| score < (b.0, b.1)) {
                best = Some((score.0, score.1, f, point, nl, nr));
            }
        }
        best.map(|b| (b.2, b.3, b.4, b.5))
    }
}

fn covers(b: &Bounds, region: &Bounds) -> bool {
    b.iter().zip(region).all(|(r, g)| r.0 <= g.0 && r.1 >= g.1)
}

fn matches(b: &Bounds, key: &ClassKey) -> bool {
    b.iter().zip(key.0.iter()).all(|(&(lo, hi), &v)| lo <= v && v <= hi)
}

/// Maximum set of pairwise disjoint intervals in one field (earliest-end greedy).
fn greedy_iset(bounds: &[Bounds], field: usize) -> Vec<u32> {
    let mut order: Vec<u32> = (0..bounds.len() as u32).collect();
    order.sort_unstable_by_key(|&r| (bounds[r as usize][field].1, bounds[r as usize][field].0, r));
    let mut picked = Vec::new();
    let mut last_hi: Option<u32> = None;
    for r in order {
        let (lo, hi) = bounds[r as usize][field];
        if last_hi.is_none_or(|h| lo > h) {
            picked.push(r);
            last_hi = Some(hi);
        }
    }
    picked
}

impl ClassifierEngine {
    pub fn build(rs: &RuleSet, cfg: EngineConfig) -> ClassifierEngine {
        let schema = rs.schema().clone();
        let mut rules = rs.rules().to_vec();
        rules.sort_by(|a, b| b.priority.cmp(&a.priority).then(a.rule_id.cmp(&b.rule_id)));
        let bounds: Vec<Bounds> = rules.iter().map(|r| r.bounds(&schema)).collect();
        let n = rules.len();

        let mut in_iset = vec![false; n];
        let mut iset = None;
        if cfg.use_learned_index && n > 0 {
            let (field, picked) = (0..FIELD_COUNT)
                .map(|f| (f, greedy_iset(&bounds, f)))
                .max_by_key(|(f, p)| (p.len(), std::cmp::Reverse(*f)))
                .expect("at least one field");
            if picked.len() >= cfg.min_iset_rules.max(1) {
                let intervals = picked
                    .iter()
                    .map(|&r| (bounds[r as usize][field].0, bounds[r as usize][field].1, r))
                    .collect();
                for &r in &picked {
                    in_iset[r as usize] = true;
                }
                iset = Some((field, LearnedIndex::build(intervals)));
            }
        }

        let remainder: Vec<u32> = (0..n as u32).filter(|&r| !in_iset[r as usize]).collect();
        let full: Bounds = std::array::from_fn(|i| (0, schema.fields()[i].max_value()));
        let mut b = Builder {
            bounds: &bounds,
            leaf_max: cfg.leaf_max_rules.max(1),
            // cap replication so adversarial sets cannot blow up memory
            budget: remainder.len().saturating_mul(64).max(4096),
            nodes: Vec::new(),
            leaf_rules: Vec::new(),
            stats: EngineStats::default(),
        };
        b.stats.tree_rules = remainder.len();
        b.build(remainder, full, 0);
        let mut stats = b.stats;
        stats.rules = n;
        stats.tree_nodes = b.nodes.len();
        if let Some((f, idx)) = &iset {
            stats.iset_rules = idx.len();
            stats.iset_field = Some(*f);
            stats.iset_max_error = idx.max_error();
        }
        let (nodes, leaf_rules) = (b.nodes, b.leaf_rules);
        ClassifierEngine { schema, rules, bounds, nodes, leaf_rules, iset, stats }
    }

    fn best_rank(&self, key: &ClassKey) -> Option<u32> {
        let mut best = None;
        if let Some((f, idx)) = &self.iset {
            if let Some(r) = idx.lookup(key.0[*f]) {
                if matches(&self.bounds[r as usize], key) {
                    best = Some(r);
                }
            }
        }
        let mut n = 0u32;
        loop {
            match self.nodes[n as usize] {
                Node::Split { field, point, left, right } => {
                    n = if key.0[field as usize] < point { left } else { right };
                }
                Node::Leaf { start, len } => {
                    for &r in &self.leaf_rules[start as usize..(start + len) as usize] {
                        if best.is_some_and(|b| r > b) {
                            break;
                        }
                        if matches(&self.bounds[r as usize], key) {
                            return Some(r);
                        }
                    }
                    return best;
                }
            }
        }
    }

    pub fn classify(&self, key: &ClassKey) -> Option<&Rule> {
        self.best_rank(key).map(|r| &self.rules[r as usize])
    }

    pub fn classify_values(&self, values: &[u32]) -> Result<Option<&Rule>, ClassifierError> {
        Ok(self.classify(&ClassKey::from_slice(values)?))
    }

    pub fn classify_report(&self, report: &IntReport) -> Option<&Rule> {
        self.classify(&ClassKey::from_report(report))
    }

    pub fn stats(&self) -> EngineStats {
        self.stats
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::synth::{generate_keys, generate_rules, RuleProfile};
    use crate::classifier::tests::{rule, wild};
    use crate::classifier::{classify_linear, FieldMatcher};
    use proptest::prelude::*;

    fn same(rs: &RuleSet, eng: &ClassifierEngine, keys: &[ClassKey]) {
        for k in keys {
            let want = classify_linear(rs, k).map(|r| r.rule_id);
            let got = eng.classify(k).map(|r| r.rule_id);
            assert_eq!(got, want, "key {k}");
        }
    }

    #[test]
    fn empty_engine() {
        let eng = ClassifierEngine::build(&RuleSet::empty(), EngineConfig::default());
        assert!(eng.classify(&ClassKey::default()).is_none());
    }

    #[test]
    fn synthetic_sets_agree_with_linear() {
        for profile in [RuleProfile::Acl, RuleProfile::Firewall, RuleProfile::Ipc] {
            let rs = generate_rules(profile, 2000, 11);
            let keys = generate_keys(&rs, 5000, 12);
            for cfg in [
                EngineConfig::default(),
                EngineConfig { use_learned_index: false, ..EngineConfig::default() },
                EngineConfig { leaf_max_rules: usize::MAX, ..EngineConfig::default() },
                EngineConfig { leaf_max_rules: 1, min_iset_rules: 1, use_learned_index: true },
            ] {
                let eng = ClassifierEngine::build(&rs, cfg);
                same(&rs, &eng, &keys);
            }
            let st = ClassifierEngine::build(&rs, EngineConfig::default()).stats();
            assert_eq!(st.rules, 2000);
            assert_eq!(st.iset_rules + st.tree_rules, 2000);
        }
    }

    #[test]
    fn tree_actually_splits() {
        let rs = generate_rules(RuleProfile::Acl, 4000, 3);
        let st = ClassifierEngine::build(&rs, EngineConfig { use_learned_index: false, ..EngineConfig::default() }).stats();
        assert!(st.leaves > 10, "{st:?}");
        assert!(st.max_leaf_rules <= 64, "{st:?}");
        // long destination prefixes rarely overlap, so most rules fit one interval set
        let st = ClassifierEngine::build(&rs, EngineConfig::default()).stats();
        assert!(st.iset_rules > 2000, "{st:?}");
    }

    fn arb_matcher(bits: u8) -> impl Strategy<Value = FieldMatcher> {
        let max = if bits == 32 { u32::MAX } else { (1u32 << bits) - 1 };
        // small domains make overlaps likely
        let v = 0u32..8;
        prop_oneof![
            Just(FieldMatcher::Wildcard),
            v.clone().prop_map(FieldMatcher::Exact),
            (v.clone(), v.clone()).prop_map(|(a, b)| FieldMatcher::Range { lo: a.min(b), hi: a.max(b) }),
            (any::<u32>(), 0u8..=bits).prop_map(move |(value, len)| FieldMatcher::Prefix { value: value & max, len }),
        ]
    }

    fn arb_rules() -> impl Strategy<Value = Vec<(i64, Vec<FieldMatcher>)>> {
        let schema = Schema::reflex();
        let ms: Vec<_> = schema.fields().iter().map(|d| arb_matcher(d.bits)).collect();
        proptest::collection::vec((0i64..6, ms), 0..60)
    }

    fn to_ruleset(raw: Vec<(i64, Vec<FieldMatcher>)>) -> RuleSet {
        let schema = Schema::reflex();
        let mut seen = std::collections::HashSet::new();
        let mut rules = Vec::new();
        for (prio, m) in raw {
            let r = rule(rules.len() as u32, prio, m);
            if seen.insert((prio, r.bounds(&schema))) {
                rules.push(r);
            }
        }
        RuleSet::new(schema, rules).unwrap()
    }

    proptest! {
        #[test]
        fn engine_matches_oracle(raw in arb_rules(),
                                 keys in proptest::collection::vec(proptest::array::uniform9(0u32..10), 64),
                                 leaf in 1usize..6) {
            let rs = to_ruleset(raw);
            let eng = ClassifierEngine::build(&rs, EngineConfig { leaf_max_rules: leaf, use_learned_index: true, min_iset_rules: 1 });
            for k in keys {
                let k = ClassKey(k);
                prop_assert_eq!(eng.classify(&k).map(|r| r.rule_id), classify_linear(&rs, &k).map(|r| r.rule_id));
            }
        }

        #[test]
        fn order_does_not_matter_with_explicit_priorities(raw in arb_rules(), seed in any::<u64>(),
                                 keys in proptest::collection::vec(proptest::array::uniform9(0u32..10), 32)) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let rs = to_ruleset(raw);
            let mut shuffled = rs.rules().to_vec();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let rs2 = RuleSet::new(Schema::reflex(), shuffled).unwrap();
            let a = ClassifierEngine::build(&rs, EngineConfig::default());
            let b = ClassifierEngine::build(&rs2, EngineConfig::default());
            for k in keys {
                let k = ClassKey(k);
                prop_assert_eq!(a.classify(&k).map(|r| r.rule_id), b.classify(&k).map(|r| r.rule_id));
            }
        }

        #[test]
        fn adding_lower_priority_rule_never_changes_a_match(raw in arb_rules(),
                                 extra in proptest::collection::vec(arb_matcher(8), FIELD_COUNT),
                                 keys in proptest::collection::vec(proptest::array::uniform9(0u32..10), 32)) {
            let rs = to_ruleset(raw);
            let lowest = rs.rules().iter().map(|r| r.priority).min().unwrap_or(0) - 1;
            let mut more = rs.rules().to_vec();
            more.push(rule(10_000, lowest, extra));
            let rs2 = RuleSet::new(Schema::reflex(), more).unwrap();
            let a = ClassifierEngine::build(&rs, EngineConfig::default());
            let b = ClassifierEngine::build(&rs2, EngineConfig::default());
            for k in keys {
                let k = ClassKey(k);
                if let Some(r) = a.classify(&k) {
                    prop_assert_eq!(Some(r.rule_id), b.classify(&k).map(|r| r.rule_id));
                }
            }
        }
    }

    #[test]
    fn wildcard_default_catches_misses() {
        let mut m = wild();
        m[3] = FieldMatcher::Exact(443);
        let rs = RuleSet::new(Schema::reflex(), vec![rule(0, 5, m), rule(1, 0, wild())]).unwrap();
        let eng = ClassifierEngine::build(&rs, EngineConfig::default());
        let mut k = ClassKey::default();
        k.0[3] = 443;
        assert_eq!(eng.classify(&k).unwrap().rule_id, 0);
        k.0[3] = 80;
        assert_eq!(eng.classify(&k).unwrap().rule_id, 1);
    }
}
