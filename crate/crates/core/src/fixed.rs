//! Exact rationals and round-half-to-even helpers shared by the constant
//! derivation and the datapath models.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Fractional bits of the fixed-point control-variate constant `C`.
pub const C_FRAC_BITS: u32 = 8;
pub const C_ONE: i64 = 1 << C_FRAC_BITS;

/// `num / den` rounded to the nearest integer, ties to even.
pub fn div_round_half_even(num: i128, den: i128) -> i128 {
    assert!(den != 0, "division by zero");
    let (num, den) = if den < 0 { (-num, -den) } else { (num, den) };
    let q = num.div_euclid(den);
    let r = num.rem_euclid(den);
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q & 1),
    }
}

/// Exact non-reduced rational with a positive denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: i64,
    pub den: i64,
}

impl Ratio {
    pub const ZERO: Ratio = Ratio { num: 0, den: 1 };

    pub fn new(num: i64, den: i64) -> Self {
        assert!(den > 0, "denominator must be positive");
        Self { num, den }
    }

    pub fn integer(v: i64) -> Self {
        Self { num: v, den: 1 }
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn round(self) -> i64 {
        div_round_half_even(self.num.into(), self.den.into()) as i64
    }

    /// Value scaled by `2^bits` and rounded, i.e. the fixed-point code.
    pub fn to_fixed(self, bits: u32) -> i64 {
        div_round_half_even(i128::from(self.num) << bits, self.den.into()) as i64
    }

    /// Numerator after rescaling to denominator `den` (which must be a multiple).
    pub fn scaled_to(self, den: i64) -> i64 {
        assert_eq!(den % self.den, 0, "{den} is not a multiple of {}", self.den);
        self.num * (den / self.den)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

pub fn gcd(mut a: i64, mut b: i64) -> i64 {
    a = a.abs();
    b = b.abs();
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

pub fn lcm(a: i64, b: i64) -> i64 {
    a / gcd(a, b) * b
}
