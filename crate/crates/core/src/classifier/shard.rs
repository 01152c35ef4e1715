use serde::{Deserialize, Serialize};

use super::{ClassKey, ClassifierError, Field, RuleSet};

/// Source-address bits that select a hash bucket.
pub const HASH_PREFIX_BITS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShardMode {
    /// Every shard holds the full rule set; any shard can take any report.
    #[default]
    Replicate,
    /// Reports go to the shard owning their source-prefix bucket.
    PartitionByHash,
}

fn bucket_shard(bucket: u32, shards: usize) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bucket.to_le_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h % shards as u64) as usize
}

/// Shard a key is routed to under [`ShardMode::PartitionByHash`].
pub fn shard_of_key(key: &ClassKey, shards: usize) -> usize {
    bucket_shard(key.get(Field::SrcIp) >> (32 - HASH_PREFIX_BITS), shards.max(1))
}

/// Split a rule set across `shards` classifiers.
///
/// In partition mode a rule lands on every shard owning a bucket its source
/// range touches, so wide rules are replicated.
pub fn shard_ruleset(rs: &RuleSet, shards: usize, mode: ShardMode) -> Result<Vec<RuleSet>, ClassifierError> {
    if shards == 0 {
        return Err(ClassifierError::ZeroShards);
    }
    match mode {
        ShardMode::Replicate => Ok(vec![rs.clone(); shards]),
        ShardMode::PartitionByHash => {
            let mut parts = vec![Vec::new(); shards];
            let bits = rs.schema().field(Field::SrcIp).bits;
            for r in rs.rules() {
                let (lo, hi) = r.matchers[Field::SrcIp.index()].bounds(bits);
                let (blo, bhi) = (lo >> (32 - HASH_PREFIX_BITS), hi >> (32 - HASH_PREFIX_BITS));
                let mut hit = vec![false; shards];
                for b in blo..=bhi {
                    hit[bucket_shard(b, shards)] = true;
                }
                for (s, h) in hit.into_iter().enumerate() {
                    if h {
                        parts[s].push(r.clone());
                    }
                }
            }
            parts.into_iter().map(|p| RuleSet::new(rs.schema().clone(), p)).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::classify_linear;
    use crate::classifier::synth::{generate_keys, generate_rules, RuleProfile};

    #[test]
    fn zero_shards_rejected() {
        assert_eq!(shard_ruleset(&RuleSet::empty(), 0, ShardMode::Replicate), Err(ClassifierError::ZeroShards));
    }

    #[test]
    fn partition_is_complete() {
        let rs = generate_rules(RuleProfile::Acl, 1500, 5);
        let keys = generate_keys(&rs, 4000, 6);
        for n in [1, 2, 3, 4, 8] {
            let parts = shard_ruleset(&rs, n, ShardMode::PartitionByHash).unwrap();
            assert!(parts.iter().map(RuleSet::len).sum::<usize>() >= rs.len());
            for k in &keys {
                let s = shard_of_key(k, n);
                assert_eq!(
                    classify_linear(&parts[s], k).map(|r| r.rule_id),
                    classify_linear(&rs, k).map(|r| r.rule_id)
                );
            }
        }
    }

    #[test]
    fn replicate_is_identity() {
        let rs = generate_rules(RuleProfile::Firewall, 100, 1);
        for p in shard_ruleset(&rs, 3, ShardMode::Replicate).unwrap() {
            assert_eq!(p, rs);
        }
    }
}
