//! Exact rational rates.
//!
//! Stream rates are ratios of small integers (MAC unrolling factors, element
//! count ratios, stream-width penalties), so they are kept exact and only
//! flattened to `f64` when the matrices are materialised.

use std::fmt;
use std::ops::{Div, Mul};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

/// Elements per cycle, as an exact non-negative fraction.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rate(Ratio<u64>);

/// Denominator used when a floating point bandwidth is turned into a rate.
const FLOAT_RESOLUTION: u64 = 1 << 20;

impl Rate {
    pub const ONE: Rate = Rate(Ratio::new_raw(1, 1));
    pub const ZERO: Rate = Rate(Ratio::new_raw(0, 1));

    pub fn new(numer: u64, denom: u64) -> Self {
        assert!(denom != 0, "rate with zero denominator");
        Rate(Ratio::new(numer, denom))
    }

    pub fn from_integer(n: u64) -> Self {
        Rate(Ratio::from_integer(n))
    }

    /// Truncates `x` onto a 2^-20 grid. Values below the grid resolution
    /// become the smallest representable positive rate.
    pub fn from_f64(x: f64) -> Self {
        assert!(x.is_finite() && x >= 0.0, "rate must be finite and non-negative");
        let scaled = (x * FLOAT_RESOLUTION as f64).floor();
        let numer = if scaled < 1.0 && x > 0.0 { 1 } else { scaled as u64 };
        Rate::new(numer, FLOAT_RESOLUTION)
    }

    pub fn numer(&self) -> u64 {
        *self.0.numer()
    }

    pub fn denom(&self) -> u64 {
        *self.0.denom()
    }

    pub fn is_zero(&self) -> bool {
        self.numer() == 0
    }

    pub fn to_f64(self) -> f64 {
        self.numer() as f64 / self.denom() as f64
    }

    pub fn min(self, other: Rate) -> Rate {
        std::cmp::min(self, other)
    }

    pub fn max(self, other: Rate) -> Rate {
        std::cmp::max(self, other)
    }

    /// `self` clipped to at most one element per cycle.
    pub fn clip_unit(self) -> Rate {
        self.min(Rate::ONE)
    }

    pub fn recip(self) -> Rate {
        Rate(self.0.recip())
    }

    pub fn scale(self, k: u64) -> Rate {
        Rate(self.0 * k)
    }
}

impl Mul for Rate {
    type Output = Rate;
    fn mul(self, rhs: Rate) -> Rate {
        Rate(self.0 * rhs.0)
    }
}

impl Div for Rate {
    type Output = Rate;
    fn div(self, rhs: Rate) -> Rate {
        Rate(self.0 / rhs.0)
    }
}

impl fmt::Debug for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numer(), self.denom())
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.denom() == 1 {
            write!(f, "{}", self.numer())
        } else {
            write!(f, "{}/{}", self.numer(), self.denom())
        }
    }
}

impl Serialize for Rate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.to_f64())
    }
}

impl<'de> Deserialize<'de> for Rate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let x = f64::deserialize(d)?;
        if !x.is_finite() || x < 0.0 {
            return Err(serde::de::Error::custom("rate must be a finite non-negative number"));
        }
        Ok(Rate::from_f64(x))
    }
}
