//! Fixed-iteration approximations used by the ASIC engines. Every intermediate is BF16.

use super::bf16::Bf16;
use super::NumericsError;

fn c(x: f64) -> Bf16 {
    Bf16::from_f64(x)
}

/// Splits a finite nonzero value into (D', e) with |x| = D' * 2^e and D' in [0.5, 1).
fn normalize(x: Bf16) -> (Bf16, i32) {
    let a = x.abs().to_f64();
    let mut e = a.log2().floor() as i32 + 1;
    let mut m = a * 2f64.powi(-e);
    if m >= 1.0 {
        m *= 0.5;
        e += 1;
    } else if m < 0.5 {
        m *= 2.0;
        e -= 1;
    }
    (Bf16::from_f64(m), e)
}

pub fn nr_reciprocal(d: Bf16) -> Result<Bf16, NumericsError> {
    if d.is_nan() {
        return Ok(Bf16::NAN);
    }
    if d.is_zero() {
        return Err(NumericsError::DivideByZero);
    }
    if d.is_infinite() {
        return Ok(if d.is_sign_negative() { Bf16::NEG_ZERO } else { Bf16::ZERO });
    }
    let (dp, e) = normalize(d);
    let mut x = c(48.0 / 17.0) - c(32.0 / 17.0) * dp;
    for _ in 0..3 {
        let t = dp * x;
        let u = Bf16::ONE - t;
        x = x + x * u;
    }
    let r = x.scale_pow2(-e);
    Ok(if d.is_sign_negative() { -r } else { r })
}

/// numerator / d by Newton-Raphson reciprocal then one multiply.
pub fn nr_divide(numerator: Bf16, d: Bf16) -> Result<Bf16, NumericsError> {
    Ok(numerator * nr_reciprocal(d)?)
}

pub const INV_SQRT_MAGIC: u32 = 0x5f37_59df;

pub fn fast_inv_sqrt(d: Bf16) -> Result<Bf16, NumericsError> {
    if d.is_nan() {
        return Ok(Bf16::NAN);
    }
    if d.is_sign_negative() || d.is_zero() {
        return Err(NumericsError::Domain("fast_inv_sqrt requires d > 0"));
    }
    if d.is_infinite() {
        return Ok(Bf16::ZERO);
    }
    // d = m * 4^j with m in [1, 4); the iteration runs on m.
    let j = (d.to_f64().log2().floor() as i32).div_euclid(2);
    let m = d.scale_pow2(-2 * j);
    let l = (m.to_bits() as u32) << 16;
    let lp = INV_SQRT_MAGIC.wrapping_sub(l >> 1);
    let mut x = Bf16::from_bits((lp >> 16) as u16);
    let dp = m * Bf16::HALF;
    let three_halves = c(1.5);
    for _ in 0..2 {
        let xx = x * x;
        let t = dp * xx;
        x = x * (three_halves - t);
    }
    Ok(x.scale_pow2(-j))
}

const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 0.6875;
const LN2_LO: f64 = std::f64::consts::LN_2 - 0.6875;

/// Taylor coefficients 1/n! for n = 0..5.
const EXP_COEFFS: [f64; 6] = [1.0, 1.0, 0.5, 1.0 / 6.0, 1.0 / 24.0, 1.0 / 120.0];

/// e^x = 2^k * e^r with r near [-ln2/2, ln2/2], e^r by a 6-term Taylor polynomial.
pub fn taylor_exp(x: Bf16) -> Bf16 {
    if x.is_nan() {
        return Bf16::NAN;
    }
    if x.is_infinite() {
        return if x.is_sign_negative() { Bf16::ZERO } else { Bf16::INFINITY };
    }
    let t = x * c(LOG2E);
    let k = t.to_f64().round_ties_even();
    if k > 128.0 {
        return Bf16::INFINITY;
    }
    if k < -136.0 {
        return Bf16::ZERO;
    }
    let kb = Bf16::from_f64(k);
    let r = (x - kb * c(LN2_HI)) - kb * c(LN2_LO);
    let mut p = c(EXP_COEFFS[5]);
    for &coef in EXP_COEFFS[..5].iter().rev() {
        p = p * r + c(coef);
    }
    p.scale_pow2(k as i32)
}

/// Taylor coefficients of tanh in x: 1, -1/3, 2/15, -17/315, 62/2835, -1382/155925.
const TANH_COEFFS: [f64; 6] = [1.0, -1.0 / 3.0, 2.0 / 15.0, -17.0 / 315.0, 62.0 / 2835.0, -1382.0 / 155925.0];

/// Arguments above this use (1 - e^-2|x|) / (1 + e^-2|x|).
pub const TANH_TAYLOR_LIMIT: f64 = 0.75;

pub fn taylor_tanh(x: Bf16) -> Bf16 {
    if x.is_nan() {
        return Bf16::NAN;
    }
    if x.is_zero() {
        return x;
    }
    let a = x.abs();
    if a.to_f64() <= TANH_TAYLOR_LIMIT {
        let x2 = x * x;
        let mut p = c(TANH_COEFFS[5]);
        for &coef in TANH_COEFFS[..5].iter().rev() {
            p = p * x2 + c(coef);
        }
        return x * p;
    }
    let e = taylor_exp(-(a + a));
    let num = Bf16::ONE - e;
    let den = Bf16::ONE + e;
    let t = nr_divide(num, den).expect("denominator >= 1");
    if x.is_sign_negative() {
        -t
    } else {
        t
    }
}

pub const GELU_CUBIC: f64 = 0.044715;
pub const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// x/2 * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3))).
pub fn gelu(x: Bf16) -> Bf16 {
    let x3 = x * x * x;
    let inner = x + c(GELU_CUBIC) * x3;
    let u = c(SQRT_2_OVER_PI) * inner;
    let t = taylor_tanh(u);
    (x * Bf16::HALF) * (Bf16::ONE + t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64) -> Bf16 {
        Bf16::from_f64(x)
    }

    #[test]
    fn reciprocal_identities() {
        assert_eq!(nr_divide(Bf16::ONE, b(2.0)).unwrap(), Bf16::HALF);
        assert_eq!(nr_divide(Bf16::ONE, Bf16::ONE).unwrap(), Bf16::ONE);
        let third = nr_divide(Bf16::ONE, b(3.0)).unwrap();
        assert!(third.ulp_distance(b(1.0 / 3.0)) <= 1);
        assert!(matches!(nr_divide(Bf16::ONE, Bf16::ZERO), Err(NumericsError::DivideByZero)));
        assert!(nr_divide(Bf16::ONE, Bf16::NAN).unwrap().is_nan());
        assert_eq!(nr_divide(b(6.0), b(-2.0)).unwrap(), b(-3.0));
    }

    #[test]
    fn inv_sqrt_identities() {
        assert!(fast_inv_sqrt(Bf16::ONE).unwrap().ulp_distance(Bf16::ONE) <= 1);
        assert!(fast_inv_sqrt(b(4.0)).unwrap().ulp_distance(Bf16::HALF) <= 1);
        assert!(fast_inv_sqrt(b(2.0)).unwrap().ulp_distance(b(std::f64::consts::FRAC_1_SQRT_2)) <= 1);
        assert!(fast_inv_sqrt(Bf16::ZERO).is_err());
        assert!(fast_inv_sqrt(b(-1.0)).is_err());
    }

    #[test]
    fn exp_tanh_gelu_zero() {
        assert_eq!(taylor_exp(Bf16::ZERO), Bf16::ONE);
        assert_eq!(taylor_tanh(Bf16::ZERO), Bf16::ZERO);
        assert_eq!(gelu(Bf16::ZERO), Bf16::ZERO);
    }

    #[test]
    fn exp_minus_one() {
        let e = taylor_exp(b(-1.0)).to_f64();
        let want = (-1.0f64).exp();
        assert!(((e - want) / want).abs() <= 2f64.powi(-6));
    }

    #[test]
    fn gelu_saturates() {
        for x in [4.0, 5.0, 8.0, 100.0, 3000.0] {
            assert!(gelu(b(x)).ulp_distance(b(x)) <= 1, "{x}");
        }
    }
}
