use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

/// Brain float: 1 sign bit, 8 exponent bits, 7 mantissa bits.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Bf16(u16);

impl Bf16 {
    pub const ZERO: Bf16 = Bf16(0);
    pub const NEG_ZERO: Bf16 = Bf16(0x8000);
    pub const ONE: Bf16 = Bf16(0x3f80);
    pub const HALF: Bf16 = Bf16(0x3f00);
    pub const INFINITY: Bf16 = Bf16(0x7f80);
    pub const NEG_INFINITY: Bf16 = Bf16(0xff80);
    pub const NAN: Bf16 = Bf16(0x7fc0);
    pub const MIN_POSITIVE: Bf16 = Bf16(0x0080);

    pub const fn from_bits(bits: u16) -> Self {
        Bf16(bits)
    }

    pub const fn to_bits(self) -> u16 {
        self.0
    }

    /// Round-to-nearest-even from single precision.
    pub fn from_f32(x: f32) -> Self {
        let b = x.to_bits();
        if x.is_nan() {
            return Bf16(((b >> 16) as u16) | 0x0040);
        }
        let round = 0x7fff + ((b >> 16) & 1);
        Bf16((b.wrapping_add(round) >> 16) as u16)
    }

    /// Round-to-nearest-even directly from double precision (single rounding).
    pub fn from_f64(x: f64) -> Self {
        if x.is_nan() {
            return Bf16::NAN;
        }
        let sign: u16 = if x.is_sign_negative() { 0x8000 } else { 0 };
        let a = x.abs();
        if a == 0.0 {
            return Bf16(sign);
        }
        if a.is_infinite() {
            return Bf16(sign | 0x7f80);
        }
        let exp_field = ((a.to_bits() >> 52) & 0x7ff) as i32;
        if exp_field == 0 {
            return Bf16(sign);
        }
        let e = exp_field - 1023;
        let q = if e >= -126 { e - 7 } else { -133 };
        let scaled = a * 2f64.powi(-q);
        let v = scaled.round_ties_even() * 2f64.powi(q);
        Bf16(((v as f32).to_bits() >> 16) as u16 | sign)
    }

    pub fn to_f32(self) -> f32 {
        f32::from_bits((self.0 as u32) << 16)
    }

    pub fn to_f64(self) -> f64 {
        self.to_f32() as f64
    }

    pub fn is_nan(self) -> bool {
        self.0 & 0x7fff > 0x7f80
    }

    pub fn is_infinite(self) -> bool {
        self.0 & 0x7fff == 0x7f80
    }

    pub fn is_finite(self) -> bool {
        self.0 & 0x7f80 != 0x7f80
    }

    pub fn is_zero(self) -> bool {
        self.0 & 0x7fff == 0
    }

    pub fn is_sign_negative(self) -> bool {
        self.0 & 0x8000 != 0
    }

    pub fn is_normal(self) -> bool {
        let e = self.0 & 0x7f80;
        e != 0 && e != 0x7f80
    }

    pub fn abs(self) -> Self {
        Bf16(self.0 & 0x7fff)
    }

    /// Biased exponent field.
    pub fn exponent_field(self) -> u16 {
        (self.0 >> 7) & 0xff
    }

    pub fn max(self, other: Self) -> Self {
        if other.to_f32() > self.to_f32() {
            other
        } else {
            self
        }
    }

    pub fn min(self, other: Self) -> Self {
        if other.to_f32() < self.to_f32() {
            other
        } else {
            self
        }
    }

    /// Multiplies by 2^k with a single rounding (exponent adjustment).
    pub fn scale_pow2(self, k: i32) -> Self {
        Bf16::from_f64(self.to_f64() * 2f64.powi(k))
    }

    /// Position on the totally ordered line of finite values; used for ULP distances.
    pub fn ordinal(self) -> i32 {
        let mag = (self.0 & 0x7fff) as i32;
        if self.is_sign_negative() {
            -mag
        } else {
            mag
        }
    }

    pub fn ulp_distance(self, other: Self) -> u32 {
        (self.ordinal() - other.ordinal()).unsigned_abs()
    }

    /// Every positive normal value, ascending.
    pub fn positive_normals() -> impl Iterator<Item = Bf16> {
        (0x0080u16..0x7f80).map(Bf16)
    }
}

impl fmt::Debug for Bf16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(0x{:04x})", self.to_f32(), self.0)
    }
}

impl fmt::Display for Bf16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_f32(), f)
    }
}

impl PartialOrd for Bf16 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        self.to_f32().partial_cmp(&other.to_f32())
    }
}

impl From<f32> for Bf16 {
    fn from(x: f32) -> Self {
        Bf16::from_f32(x)
    }
}

// Sums and products of two BF16 values are exact in f64 whenever the rounding could matter.
impl Add for Bf16 {
    type Output = Bf16;
    fn add(self, rhs: Bf16) -> Bf16 {
        Bf16::from_f64(self.to_f64() + rhs.to_f64())
    }
}

impl Sub for Bf16 {
    type Output = Bf16;
    fn sub(self, rhs: Bf16) -> Bf16 {
        Bf16::from_f64(self.to_f64() - rhs.to_f64())
    }
}

impl Mul for Bf16 {
    type Output = Bf16;
    fn mul(self, rhs: Bf16) -> Bf16 {
        Bf16::from_f64(self.to_f64() * rhs.to_f64())
    }
}

impl Neg for Bf16 {
    type Output = Bf16;
    fn neg(self) -> Bf16 {
        Bf16(self.0 ^ 0x8000)
    }
}

pub fn bf16_round(x: f64) -> Bf16 {
    Bf16::from_f64(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_values() {
        assert_eq!(bf16_round(1.0), Bf16::ONE);
        assert_eq!(bf16_round(0.0).to_bits(), 0);
        assert_eq!(bf16_round(-0.0).to_bits(), 0x8000);
        assert_eq!(bf16_round(0.5), Bf16::HALF);
    }

    #[test]
    fn one_third_matches_f32_route() {
        let via32 = Bf16::from_f32(1.0f32 / 3.0);
        assert_eq!(bf16_round(1.0 / 3.0), via32);
        assert_eq!(via32.to_bits(), 0x3eab);
    }

    #[test]
    fn ties_to_even() {
        // 1 + 2^-8 sits halfway between 1 and 1 + 2^-7.
        assert_eq!(bf16_round(1.0 + 2f64.powi(-8)), Bf16::ONE);
        assert_eq!(bf16_round(1.0 + 3.0 * 2f64.powi(-8)).to_f64(), 1.0 + 2.0 * 2f64.powi(-7));
    }

    #[test]
    fn overflow_and_subnormal() {
        assert_eq!(bf16_round(1e39), Bf16::INFINITY);
        assert_eq!(bf16_round(-1e39), Bf16::NEG_INFINITY);
        assert_eq!(bf16_round(2f64.powi(-133)).to_bits(), 1);
        assert_eq!(bf16_round(2f64.powi(-135)).to_bits(), 0);
        assert!(bf16_round(f64::NAN).is_nan());
    }

    #[test]
    fn ordinal_distance() {
        let a = Bf16::from_bits(0x3f80);
        assert_eq!(a.ulp_distance(Bf16::from_bits(0x3f81)), 1);
        assert_eq!(Bf16::ZERO.ulp_distance(Bf16::NEG_ZERO), 0);
        assert_eq!(Bf16::from_bits(0x0001).ulp_distance(Bf16::from_bits(0x8001)), 2);
    }
}
