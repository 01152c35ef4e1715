use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::time::VirtualTime;

/// Derive an independent sub-seed from a root seed and a label.
///
/// Adding a new labelled consumer never shifts the streams of existing ones.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, folded with the root seed through splitmix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(seed ^ splitmix64(h))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seedable, counter-based generator (ChaCha8) used for every random draw in a run.
#[derive(Debug, Clone)]
pub struct SimRng(ChaCha8Rng);

impl SimRng {
    pub fn new(seed: u64) -> Self {
        SimRng(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn labeled(seed: u64, label: &str) -> Self {
        SimRng::new(derive_seed(seed, label))
    }

    /// Uniform in `[lo, hi]` inclusive.
    pub fn uniform_time(&mut self, lo: VirtualTime, hi: VirtualTime) -> VirtualTime {
        if hi <= lo {
            return lo;
        }
        VirtualTime::from_nanos(self.0.random_range(lo.as_nanos()..=hi.as_nanos()))
    }

    /// Exponential sample by inverse CDF, rounded to the nearest nanosecond.
    pub fn exponential(&mut self, mean: VirtualTime) -> VirtualTime {
        let u: f64 = self.0.random();
        let x = -(mean.as_nanos() as f64) * (1.0 - u).ln();
        VirtualTime::from_nanos(x.round() as u64)
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.0.random_range(0..n)
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.0.random_bool(p.clamp(0.0, 1.0))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn inner(&mut self) -> &mut ChaCha8Rng {
        &mut self.0
    }
}
