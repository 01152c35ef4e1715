//! Seeded synthetic rule sets and key streams shaped like the usual
//! ACL, firewall and IP-chain benchmark families.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Action, ClassKey, FieldMatcher, Rule, RuleSet, Schema, FIELD_COUNT};
use crate::simnet::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleProfile {
    /// Long prefixes, exact destination ports.
    Acl,
    /// Short prefixes, wide port ranges, many wildcards.
    Firewall,
    /// A mix of the two.
    Ipc,
}

impl std::str::FromStr for RuleProfile {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "acl" => Ok(RuleProfile::Acl),
            "fw" | "firewall" => Ok(RuleProfile::Firewall),
            "ipc" => Ok(RuleProfile::Ipc),
            _ => Err(format!("unknown rule profile `{s}` (acl, fw, ipc)")),
        }
    }
}

const WELL_KNOWN: [u32; 8] = [22, 25, 53, 80, 123, 443, 3306, 8080];

fn prefix(rng: &mut SimRng, bases: &[u32], min_len: u8, max_len: u8) -> FieldMatcher {
    let len = rng.inner().random_range(min_len..=max_len);
    if len == 0 {
        return FieldMatcher::Wildcard;
    }
    // cluster addresses under a few /8 bases, like real tables
    let base = bases[rng.below(bases.len() as u64) as usize];
    let value = (base << 24) | (rng.inner().random::<u32>() & 0x00ff_ffff);
    let mask = if len == 32 { u32::MAX } else { !(u32::MAX >> len) };
    FieldMatcher::Prefix { value: value & mask, len }
}

fn port(rng: &mut SimRng, p_exact: f64, p_wild: f64) -> FieldMatcher {
    let u: f64 = rng.inner().random();
    if u < p_wild {
        FieldMatcher::Wildcard
    } else if u < p_wild + p_exact {
        FieldMatcher::Exact(WELL_KNOWN[rng.below(WELL_KNOWN.len() as u64) as usize])
    } else if rng.chance(0.5) {
        FieldMatcher::Range { lo: 1024, hi: 65535 }
    } else {
        let lo = rng.inner().random_range(0..60000);
        FieldMatcher::Range { lo, hi: lo + rng.inner().random_range(0..5000) }
    }
}

fn one_rule(profile: RuleProfile, rng: &mut SimRng, bases: &[u32]) -> Vec<FieldMatcher> {
    let profile = match profile {
        RuleProfile::Ipc if rng.chance(0.5) => RuleProfile::Acl,
        RuleProfile::Ipc => RuleProfile::Firewall,
        p => p,
    };
    let mut m = vec![FieldMatcher::Wildcard; FIELD_COUNT];
    match profile {
        RuleProfile::Acl => {
            m[0] = prefix(rng, bases, 16, 32);
            m[1] = prefix(rng, bases, 24, 32);
            m[2] = port(rng, 0.05, 0.9);
            m[3] = port(rng, 0.7, 0.1);
        }
        _ => {
            m[0] = if rng.chance(0.3) { FieldMatcher::Wildcard } else { prefix(rng, bases, 8, 24) };
            m[1] = if rng.chance(0.3) { FieldMatcher::Wildcard } else { prefix(rng, bases, 8, 24) };
            m[2] = port(rng, 0.0, 0.7);
            m[3] = port(rng, 0.3, 0.3);
        }
    }
    m[4] = match rng.below(10) {
        0..=5 => FieldMatcher::Exact(6),
        6..=7 => FieldMatcher::Exact(17),
        _ => FieldMatcher::Wildcard,
    };
    // a few rules key on where in the network the report came from
    if rng.chance(0.1) {
        m[5] = FieldMatcher::Exact(rng.below(16) as u32);
    }
    if rng.chance(0.05) {
        m[8] = FieldMatcher::Exact(1 + rng.below(4) as u32);
    }
    m
}

/// `n` distinct rules; earlier rules get higher priority.
pub fn generate_rules(profile: RuleProfile, n: usize, seed: u64) -> RuleSet {
    let schema = Schema::reflex();
    let mut rng = SimRng::labeled(seed, "synth-rules");
    let bases: Vec<u32> = (0..12).map(|_| 1 + rng.below(222) as u32).collect();
    let mut seen = std::collections::HashSet::new();
    let mut rules = Vec::with_capacity(n);
    while rules.len() < n {
        let matchers = one_rule(profile, &mut rng, &bases);
        let r = Rule { rule_id: rules.len() as u32, priority: (n - rules.len()) as i64, matchers, action: Action::default() };
        if seen.insert(r.bounds(&schema)) {
            rules.push(r);
        }
    }
    RuleSet::new(schema, rules).expect("generated rules are valid")
}

/// Keys that mostly land inside some rule, plus uniform background traffic.
pub fn generate_keys(rs: &RuleSet, n: usize, seed: u64) -> Vec<ClassKey> {
    let mut rng = SimRng::labeled(seed, "synth-keys");
    let schema = rs.schema();
    (0..n)
        .map(|_| {
            if !rs.is_empty() && rng.chance(0.7) {
                let r = &rs.rules()[rng.below(rs.len() as u64) as usize];
                let b = r.bounds(schema);
                ClassKey(std::array::from_fn(|i| rng.inner().random_range(b[i].0..=b[i].1)))
            } else {
                let mut k: [u32; FIELD_COUNT] = std::array::from_fn(|i| {
                    let max = schema.fields()[i].max_value();
                    rng.inner().random_range(0..=max)
                });
                k[4] = [6, 17, 1][rng.below(3) as usize];
                k[5] = rng.below(16) as u32;
                k[8] = rng.below(5) as u32;
                ClassKey(k)
            }
        })
        .collect()
}
