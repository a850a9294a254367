//! Fixed-point score arithmetic.
//!
//! Scores are kept in thousandths of a point so that sums, comparisons and
//! re-evaluations are exact and byte-stable.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

const SCALE: i64 = 1000;

/// A score in points, stored as an integer number of thousandths.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Points(i64);

impl Points {
    pub const ZERO: Points = Points(0);

    pub const fn from_milli(milli: i64) -> Self {
        Points(milli)
    }

    pub const fn whole(points: i64) -> Self {
        Points(points * SCALE)
    }

    /// Rounds to the nearest thousandth.
    pub fn from_f64(value: f64) -> Self {
        Points((value * SCALE as f64).round() as i64)
    }

    pub const fn milli(self) -> i64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / SCALE as f64
    }

    pub fn is_negative(self) -> bool {
        self.0 < 0
    }

    /// `self * numerator / denominator`, rounded toward zero.
    pub fn scaled(self, numerator: i64, denominator: i64) -> Self {
        assert!(denominator > 0, "denominator must be positive");
        Points(self.0 * numerator / denominator)
    }

    pub fn clamp_non_negative(self) -> Self {
        Points(self.0.max(0))
    }
}

impl fmt::Display for Points {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        let whole = abs / SCALE as u64;
        let frac = abs % SCALE as u64;
        if frac == 0 {
            write!(f, "{sign}{whole}")
        } else {
            let digits = format!("{frac:03}");
            write!(f, "{sign}{whole}.{}", digits.trim_end_matches('0'))
        }
    }
}

impl Add for Points {
    type Output = Points;
    fn add(self, rhs: Points) -> Points {
        Points(self.0 + rhs.0)
    }
}

impl AddAssign for Points {
    fn add_assign(&mut self, rhs: Points) {
        self.0 += rhs.0;
    }
}

impl Sub for Points {
    type Output = Points;
    fn sub(self, rhs: Points) -> Points {
        Points(self.0 - rhs.0)
    }
}

impl Sum for Points {
    fn sum<I: Iterator<Item = Points>>(iter: I) -> Points {
        iter.fold(Points::ZERO, Add::add)
    }
}

impl Serialize for Points {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if self.0 % SCALE == 0 {
            serializer.serialize_i64(self.0 / SCALE)
        } else {
            serializer.serialize_f64(self.as_f64())
        }
    }
}

impl<'de> Deserialize<'de> for Points {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = f64::deserialize(deserializer)?;
        if !value.is_finite() {
            return Err(serde::de::Error::custom("points must be finite"));
        }
        Ok(Points::from_f64(value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_trims_fraction() {
        assert_eq!(Points::whole(6).to_string(), "6");
        assert_eq!(Points::from_milli(6500).to_string(), "6.5");
        assert_eq!(Points::from_milli(1333).to_string(), "1.333");
        assert_eq!(Points::from_milli(-250).to_string(), "-0.25");
    }

    #[test]
    fn scaled_is_exact_for_equal_weights() {
        assert_eq!(Points::whole(8).scaled(3, 4), Points::whole(6));
    }

    #[test]
    fn serde_round_trip() {
        let p = Points::from_milli(2750);
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(json, "2.75");
        assert_eq!(serde_json::from_str::<Points>(&json).unwrap(), p);
        assert_eq!(serde_json::to_string(&Points::whole(4)).unwrap(), "4");
    }
}
