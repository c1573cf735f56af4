//! Absolute timestamps with microsecond resolution.
//!
//! All durations in this crate are integer microseconds; timestamps are a
//! (seconds, micros) pair ordered lexicographically.

use std::fmt;

use serde::{Deserialize, Serialize};

pub const MICROS_PER_SEC: u64 = 1_000_000;

/// Absolute instant: seconds since an arbitrary epoch plus microseconds
/// within the second (always `< 1_000_000`).
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct Timestamp {
    pub seconds: u64,
    pub micros: u32,
}

impl Timestamp {
    pub fn new(seconds: u64, micros: u32) -> Timestamp {
        assert!(
            (micros as u64) < MICROS_PER_SEC,
            "micros out of range: {micros}"
        );
        Timestamp { seconds, micros }
    }

    /// Total microseconds since the epoch. Wide enough to never overflow.
    pub fn total_micros(self) -> u128 {
        self.seconds as u128 * MICROS_PER_SEC as u128 + self.micros as u128
    }

    pub fn add_micros(self, delta: u64) -> Timestamp {
        let total = self.micros as u64 + delta;
        Timestamp {
            seconds: self.seconds + total / MICROS_PER_SEC,
            micros: (total % MICROS_PER_SEC) as u32,
        }
    }

    /// Microseconds from `earlier` to `self`.
    ///
    /// Panics if `earlier` is later than `self` or the gap exceeds `u64`.
    pub fn micros_since(self, earlier: Timestamp) -> u64 {
        let diff = self
            .total_micros()
            .checked_sub(earlier.total_micros())
            .expect("timestamp regression");
        u64::try_from(diff).expect("timestamp gap exceeds u64 micros")
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:06}", self.seconds, self.micros)
    }
}
