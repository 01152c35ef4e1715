//! Prioritized multi-field classification of telemetry reports and dispatch
//! of projected reports to monitors.
//!
//! [`classify_linear`] is the reference semantics; [`ClassifierEngine`] is the
//! accelerated engine and must agree with it on every key.

mod dispatch;
mod engine;
mod learned;
mod rules;
mod shard;
pub mod synth;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::telemetry::IntReport;

pub use dispatch::{dispatch, ProjectedHop, ProjectedReport, ReportFields};
pub use engine::{ClassifierEngine, EngineConfig, EngineStats};
pub use learned::LearnedIndex;
pub use rules::{format_rule, parse_ruleset};
pub use shard::{shard_of_key, shard_ruleset, ShardMode, HASH_PREFIX_BITS};

pub use crate::monitors::MonitorId;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClassifierError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("key has {got} fields, schema has {expected}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("rule {rule_id}: range {lo}:{hi} has lo > hi")]
    InvertedRange { rule_id: u32, lo: u32, hi: u32 },
    #[error("rule {rule_id}: prefix length {len} exceeds {bits}-bit field `{field}`")]
    PrefixTooLong { rule_id: u32, field: &'static str, len: u8, bits: u8 },
    #[error("rule {rule_id}: value {value} does not fit {bits}-bit field `{field}`")]
    ValueTooWide { rule_id: u32, field: &'static str, value: u32, bits: u8 },
    #[error("duplicate rule id {0}")]
    DuplicateRuleId(u32),
    #[error("rules {0} and {1} have identical priority and matchers")]
    DuplicateRule(u32, u32),
    #[error("rule {0} has no destinations")]
    NoDestinations(u32),
    #[error("unknown report field `{0}` in projection")]
    UnknownProjectionField(String),
    #[error("shard count must be at least 1")]
    ZeroShards,
}

/// Classification fields, in key order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Field {
    SrcIp,
    DstIp,
    SrcPort,
    DstPort,
    Proto,
    SwitchId,
    LinkId,
    QueueId,
    DropReason,
}

pub const FIELD_COUNT: usize = 9;

impl Field {
    pub const ALL: [Field; FIELD_COUNT] = [
        Field::SrcIp,
        Field::DstIp,
        Field::SrcPort,
        Field::DstPort,
        Field::Proto,
        Field::SwitchId,
        Field::LinkId,
        Field::QueueId,
        Field::DropReason,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDesc {
    pub name: &'static str,
    pub bits: u8,
}

impl FieldDesc {
    pub fn max_value(self) -> u32 {
        if self.bits >= 32 {
            u32::MAX
        } else {
            (1u32 << self.bits) - 1
        }
    }
}

/// Field descriptors for the classification key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Schema {
    fields: [FieldDesc; FIELD_COUNT],
}

impl Default for Schema {
    fn default() -> Self {
        Schema::reflex()
    }
}

impl Schema {
    /// 5-tuple plus switch, link, queue and drop reason.
    pub fn reflex() -> Self {
        let d = |name, bits| FieldDesc { name, bits };
        Schema {
            fields: [
                d("src_ip", 32),
                d("dst_ip", 32),
                d("src_port", 16),
                d("dst_port", 16),
                // four bytes, like the other trace fields
                d("proto", 32),
                d("switch_id", 32),
                d("link_id", 32),
                d("queue_id", 32),
                d("drop_reason", 8),
            ],
        }
    }

    pub fn arity(&self) -> usize {
        FIELD_COUNT
    }

    pub fn field(&self, f: Field) -> FieldDesc {
        self.fields[f.index()]
    }

    pub fn fields(&self) -> &[FieldDesc; FIELD_COUNT] {
        &self.fields
    }
}

/// A classification key: one value per schema field.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassKey(pub [u32; FIELD_COUNT]);

impl ClassKey {
    pub fn from_slice(values: &[u32]) -> Result<Self, ClassifierError> {
        let arr: [u32; FIELD_COUNT] = values
            .try_into()
            .map_err(|_| ClassifierError::ArityMismatch { expected: FIELD_COUNT, got: values.len() })?;
        Ok(ClassKey(arr))
    }

    pub fn get(&self, f: Field) -> u32 {
        self.0[f.index()]
    }

    /// Key for a report, taken from the hop where it was dropped or else the last (sink-side) hop.
    ///
    /// `link_id` is `(switch_id << 16) | egress_port`.
    pub fn from_report(r: &IntReport) -> Self {
        let hop = match r.drop {
            Some(d) => &r.hops[d.hop_index],
            None => r.last_hop(),
        };
        let sw = hop.switch_id.0;
        ClassKey([
            r.flow.src_ip,
            r.flow.dst_ip,
            u32::from(r.flow.src_port),
            u32::from(r.flow.dst_port),
            u32::from(r.flow.proto),
            sw,
            (sw << 16) | u32::from(hop.egress_port),
            hop.queue_id,
            r.drop.map_or(0, |d| d.reason.code()),
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FieldMatcher {
    Wildcard,
    Exact(u32),
    Prefix { value: u32, len: u8 },
    /// Inclusive on both ends.
    Range { lo: u32, hi: u32 },
}

impl FieldMatcher {
    /// Inclusive `[lo, hi]` interval this matcher accepts in a field of `bits` width.
    pub fn bounds(&self, bits: u8) -> (u32, u32) {
        let max = FieldDesc { name: "", bits }.max_value();
        match *self {
            FieldMatcher::Wildcard => (0, max),
            FieldMatcher::Exact(v) => (v, v),
            FieldMatcher::Range { lo, hi } => (lo, hi),
            FieldMatcher::Prefix { value, len } => {
                if len == 0 {
                    (0, max)
                } else {
                    let host_bits = u32::from(bits - len);
                    let mask = if host_bits >= 32 { 0 } else { max & !((1u64 << host_bits) - 1) as u32 };
                    let lo = value & mask;
                    let hi = lo | (max & !mask);
                    (lo, hi)
                }
            }
        }
    }

    pub fn is_wildcard(&self, bits: u8) -> bool {
        self.bounds(bits) == (0, FieldDesc { name: "", bits }.max_value())
    }

    pub fn matches(&self, bits: u8, v: u32) -> bool {
        let (lo, hi) = self.bounds(bits);
        lo <= v && v <= hi
    }
}

/// What happens to a report that matches a rule.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub destinations: Vec<MonitorId>,
    pub projection: ReportFields,
}

impl Default for Action {
    fn default() -> Self {
        Action { destinations: vec![MonitorId::new("m0")], projection: ReportFields::all() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rule {
    pub rule_id: u32,
    /// Higher wins.
    pub priority: i64,
    pub matchers: Vec<FieldMatcher>,
    pub action: Action,
}

impl Rule {
    pub fn matches(&self, schema: &Schema, key: &ClassKey) -> bool {
        self.matchers
            .iter()
            .zip(schema.fields())
            .zip(key.0.iter())
            .all(|((m, d), &v)| m.matches(d.bits, v))
    }

    pub fn bounds(&self, schema: &Schema) -> [(u32, u32); FIELD_COUNT] {
        let mut b = [(0, 0); FIELD_COUNT];
        for (i, (m, d)) in self.matchers.iter().zip(schema.fields()).enumerate() {
            b[i] = m.bounds(d.bits);
        }
        b
    }

    /// True if `self` beats `other`: higher priority, then lower id.
    pub fn outranks(&self, other: &Rule) -> bool {
        (self.priority, std::cmp::Reverse(self.rule_id)) > (other.priority, std::cmp::Reverse(other.rule_id))
    }

    fn validate(&self, schema: &Schema) -> Result<(), ClassifierError> {
        if self.matchers.len() != schema.arity() {
            return Err(ClassifierError::ArityMismatch { expected: schema.arity(), got: self.matchers.len() });
        }
        if self.action.destinations.is_empty() {
            return Err(ClassifierError::NoDestinations(self.rule_id));
        }
        for (m, d) in self.matchers.iter().zip(schema.fields()) {
            let max = d.max_value();
            let check = |v: u32| {
                if v > max {
                    Err(ClassifierError::ValueTooWide { rule_id: self.rule_id, field: d.name, value: v, bits: d.bits })
                } else {
                    Ok(())
                }
            };
            match *m {
                FieldMatcher::Wildcard => {}
                FieldMatcher::Exact(v) => check(v)?,
                FieldMatcher::Prefix { value, len } => {
                    if len > d.bits {
                        return Err(ClassifierError::PrefixTooLong { rule_id: self.rule_id, field: d.name, len, bits: d.bits });
                    }
                    check(value)?;
                }
                FieldMatcher::Range { lo, hi } => {
                    if lo > hi {
                        return Err(ClassifierError::InvertedRange { rule_id: self.rule_id, lo, hi });
                    }
                    check(hi)?;
                }
            }
        }
        Ok(())
    }
}

/// A validated, immutable set of rules over a schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RuleSet {
    schema: Schema,
    rules: Vec<Rule>,
}

impl RuleSet {
    pub fn new(schema: Schema, rules: Vec<Rule>) -> Result<Self, ClassifierError> {
        let mut ids = std::collections::HashSet::new();
        let mut shapes = std::collections::HashMap::new();
        for r in &rules {
            r.validate(&schema)?;
            if !ids.insert(r.rule_id) {
                return Err(ClassifierError::DuplicateRuleId(r.rule_id));
            }
            if let Some(prev) = shapes.insert((r.priority, r.bounds(&schema)), r.rule_id) {
                return Err(ClassifierError::DuplicateRule(prev, r.rule_id));
            }
        }
        Ok(RuleSet { schema, rules })
    }

    pub fn empty() -> Self {
        RuleSet { schema: Schema::reflex(), rules: Vec::new() }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Every monitor named by any rule action.
    pub fn destinations(&self) -> impl Iterator<Item = &MonitorId> {
        self.rules.iter().flat_map(|r| r.action.destinations.iter())
    }
}

/// Reference classifier: scan every rule, keep the best match.
pub fn classify_linear<'a>(rs: &'a RuleSet, key: &ClassKey) -> Option<&'a Rule> {
    let mut best: Option<&Rule> = None;
    for r in &rs.rules {
        if r.matches(&rs.schema, key) && best.is_none_or(|b| r.outranks(b)) {
            best = Some(r);
        }
    }
    best
}

/// [`classify_linear`] over an untyped field vector.
pub fn classify_linear_values<'a>(rs: &'a RuleSet, values: &[u32]) -> Result<Option<&'a Rule>, ClassifierError> {
    Ok(classify_linear(rs, &ClassKey::from_slice(values)?))
}

impl fmt::Display for ClassKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u32::to_string).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn wild() -> Vec<FieldMatcher> {
        vec![FieldMatcher::Wildcard; FIELD_COUNT]
    }

    pub(crate) fn rule(id: u32, prio: i64, matchers: Vec<FieldMatcher>) -> Rule {
        Rule { rule_id: id, priority: prio, matchers, action: Action::default() }
    }

    #[test]
    fn prefix_bounds() {
        let m = FieldMatcher::Prefix { value: 0x0a01_0203, len: 8 };
        assert_eq!(m.bounds(32), (0x0a00_0000, 0x0aff_ffff));
        assert_eq!(FieldMatcher::Prefix { value: 5, len: 32 }.bounds(32), (5, 5));
        assert_eq!(FieldMatcher::Prefix { value: 5, len: 0 }.bounds(32), (0, u32::MAX));
        assert_eq!(FieldMatcher::Prefix { value: 0x8000, len: 1 }.bounds(16), (0x8000, 0xffff));
    }

    #[test]
    fn all_wildcard_matches_everything() {
        let rs = RuleSet::new(Schema::reflex(), vec![rule(0, 1, wild())]).unwrap();
        for k in [ClassKey::default(), ClassKey([u32::MAX, 1, 2, 3, 4, 5, 6, 7, 255])] {
            assert_eq!(classify_linear(&rs, &k).unwrap().rule_id, 0);
        }
    }

    #[test]
    fn higher_priority_wins() {
        let mut m = wild();
        m[0] = FieldMatcher::Prefix { value: 0x0a00_0000, len: 8 };
        let rs = RuleSet::new(Schema::reflex(), vec![rule(1, 10, m), rule(2, 20, wild())]).unwrap();
        let mut key = ClassKey::default();
        key.0[0] = 0x0a01_0101;
        assert_eq!(classify_linear(&rs, &key).unwrap().rule_id, 2);
    }

    #[test]
    fn equal_priority_lowest_id_wins() {
        let mut m = wild();
        m[2] = FieldMatcher::Exact(80);
        let rs = RuleSet::new(Schema::reflex(), vec![rule(5, 1, wild()), rule(3, 1, m)]).unwrap();
        let mut key = ClassKey::default();
        key.0[2] = 80;
        assert_eq!(classify_linear(&rs, &key).unwrap().rule_id, 3);
    }

    #[test]
    fn empty_ruleset_matches_nothing() {
        assert!(classify_linear(&RuleSet::empty(), &ClassKey::default()).is_none());
    }

    #[test]
    fn arity_is_checked() {
        let rs = RuleSet::empty();
        assert_eq!(
            classify_linear_values(&rs, &[1, 2, 3]),
            Err(ClassifierError::ArityMismatch { expected: 9, got: 3 })
        );
        assert!(RuleSet::new(Schema::reflex(), vec![rule(0, 0, vec![FieldMatcher::Wildcard; 5])]).is_err());
    }

    #[test]
    fn ruleset_validation() {
        let mut inverted = wild();
        inverted[3] = FieldMatcher::Range { lo: 500, hi: 100 };
        assert!(matches!(
            RuleSet::new(Schema::reflex(), vec![rule(0, 0, inverted)]),
            Err(ClassifierError::InvertedRange { .. })
        ));
        assert!(matches!(
            RuleSet::new(Schema::reflex(), vec![rule(0, 0, wild()), rule(0, 1, wild())]),
            Err(ClassifierError::DuplicateRuleId(0))
        ));
        assert!(matches!(
            RuleSet::new(Schema::reflex(), vec![rule(0, 0, wild()), rule(1, 0, wild())]),
            Err(ClassifierError::DuplicateRule(0, 1))
        ));
        let mut wide = wild();
        wide[2] = FieldMatcher::Exact(70_000);
        assert!(matches!(
            RuleSet::new(Schema::reflex(), vec![rule(0, 0, wide)]),
            Err(ClassifierError::ValueTooWide { .. })
        ));
    }

    #[test]
    fn key_from_report_uses_sink_hop() {
        use crate::telemetry::tests::{flow, hop};
        let r = IntReport::new(flow(1), 0, vec![hop(4, 1, 0), hop(7, 1, 1)], 64, None).unwrap();
        let k = ClassKey::from_report(&r);
        assert_eq!(k.get(Field::SwitchId), 7);
        assert_eq!(k.get(Field::LinkId), (7 << 16) | 2);
        assert_eq!(k.get(Field::DropReason), 0);
        assert_eq!(k.get(Field::DstPort), 80);
    }
}
