use std::fmt;
use std::ops::{Add, AddAssign, Mul, Sub};

use serde::{Deserialize, Serialize};

/// Integer nanoseconds of virtual time.
///
/// Used both for instants (time since simulation start) and for durations;
/// there is no floating-point clock anywhere in the simulator.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct VirtualTime(u64);

impl VirtualTime {
    pub const ZERO: VirtualTime = VirtualTime(0);
    pub const MAX: VirtualTime = VirtualTime(u64::MAX);

    pub const fn from_nanos(ns: u64) -> Self {
        VirtualTime(ns)
    }

    pub const fn from_micros(us: u64) -> Self {
        VirtualTime(us * 1_000)
    }

    pub const fn from_millis(ms: u64) -> Self {
        VirtualTime(ms * 1_000_000)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn checked_sub(self, rhs: VirtualTime) -> Option<VirtualTime> {
        self.0.checked_sub(rhs.0).map(VirtualTime)
    }

    pub fn saturating_sub(self, rhs: VirtualTime) -> VirtualTime {
        VirtualTime(self.0.saturating_sub(rhs.0))
    }
}

impl Add for VirtualTime {
    type Output = VirtualTime;
    fn add(self, rhs: VirtualTime) -> VirtualTime {
        VirtualTime(self.0.checked_add(rhs.0).expect("virtual time overflow"))
    }
}

impl AddAssign for VirtualTime {
    fn add_assign(&mut self, rhs: VirtualTime) {
        *self = *self + rhs;
    }
}

impl Sub for VirtualTime {
    type Output = VirtualTime;
    fn sub(self, rhs: VirtualTime) -> VirtualTime {
        VirtualTime(self.0.checked_sub(rhs.0).expect("virtual time underflow"))
    }
}

impl Mul<u64> for VirtualTime {
    type Output = VirtualTime;
    fn mul(self, rhs: u64) -> VirtualTime {
        VirtualTime(self.0.checked_mul(rhs).expect("virtual time overflow"))
    }
}

impl std::iter::Sum for VirtualTime {
    fn sum<I: Iterator<Item = VirtualTime>>(iter: I) -> VirtualTime {
        iter.fold(VirtualTime::ZERO, |a, b| a + b)
    }
}

impl From<u64> for VirtualTime {
    fn from(ns: u64) -> Self {
        VirtualTime(ns)
    }
}

impl fmt::Display for VirtualTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

/// Link bandwidth in megabits per second (equivalently, bits per microsecond).
///
/// Zero means infinite bandwidth: no serialization delay.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Bandwidth(u64);

impl Bandwidth {
    pub const INFINITE: Bandwidth = Bandwidth(0);

    pub const fn from_mbps(mbps: u64) -> Self {
        Bandwidth(mbps)
    }

    pub const fn mbps(self) -> u64 {
        self.0
    }

    pub const fn is_infinite(self) -> bool {
        self.0 == 0
    }

    /// Time to clock `size_bytes` onto the wire, rounded up to whole nanoseconds.
    pub fn serialization_delay(self, size_bytes: u32) -> VirtualTime {
        if self.is_infinite() {
            return VirtualTime::ZERO;
        }
        let bits = u128::from(size_bytes) * 8 * 1_000;
        let mbps = u128::from(self.0);
        VirtualTime::from_nanos(bits.div_ceil(mbps) as u64)
    }
}
