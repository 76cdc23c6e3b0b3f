use std::fmt;
use std::ops::{Add, AddAssign, Sub};

/// A point on (or a span of) the virtual clock, in nanoseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_micros_f64(us: f64) -> SimTime {
        SimTime((us * 1_000.0).round().max(0.0) as u64)
    }

    pub fn from_micros(us: u64) -> SimTime {
        SimTime(us * 1_000)
    }

    pub fn from_millis(ms: u64) -> SimTime {
        SimTime(ms * 1_000_000)
    }

    pub fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_micros_f64(self) -> f64 {
        self.0 as f64 / 1_000.0
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}us", self.as_micros_f64())
    }
}

/// Time to push `len` bytes through a link of `bandwidth_bps`, rounded up to
/// the next nanosecond.
pub fn serialization_delay(len: usize, bandwidth_bps: u64) -> SimTime {
    if len == 0 {
        return SimTime::ZERO;
    }
    let bits = len as u128 * 8 * 1_000_000_000;
    let bw = bandwidth_bps.max(1) as u128;
    SimTime(bits.div_ceil(bw) as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialization_of_128_bytes_at_one_gigabit() {
        // 128 * 8 bits / 1e9 b/s = 1.024 us
        assert_eq!(serialization_delay(128, 1_000_000_000), SimTime(1_024));
        assert_eq!(serialization_delay(0, 1), SimTime::ZERO);
        // 1 byte at 3 b/s rounds up to 2.666..s -> 2_666_666_667 ns
        assert_eq!(serialization_delay(1, 3), SimTime(2_666_666_667));
    }
}
