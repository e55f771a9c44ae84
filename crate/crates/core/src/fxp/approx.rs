//! Hardware-friendly approximations of `exp`, `log`, division and softmax.
//!
//! `exp` evaluates a degree-5 polynomial expanded around `a = 0.5` in Horner
//! form (five multiplies, five adds), with `e^a` folded into the coefficients.
//! Inputs are range-reduced as `x = r + k·ln2` with `r ∈ [0, ln2)`, which keeps
//! `r` inside the interval the polynomial was expanded for; the `2^k` factor
//! is a shift in fixed point.
//!
//! `log` splits `x = m·2^e` with `m ∈ [1, 2)` and evaluates a degree-5 fit of
//! `ln(m)`; division is `a / b = exp(log a − log b)`.
//!
//! The fixed-point versions run their intermediates in a Q24 working register
//! (`i64`) and round to the operand format once, at the end.

use std::f64::consts::{LN_2, LOG2_E};

use super::{round_shift, saturate, Fx16, FxFormat, FxpError, Scalar};

/// Expansion point of the exponential polynomial.
pub const EXP_CENTER: f64 = 0.5;

/// Polynomial coefficients for `e^x ≈ e^a · P(x)`, lowest order first.
pub const EXP_POLY: [f64; 6] = [0.60653, 0.60659, 0.30260, 0.10347, 0.02118, 0.00833];

const E_HALF: f64 = 1.648_721_270_700_128_1;

const fn fold_exp_coeffs() -> [f64; 6] {
    let mut out = [0.0; 6];
    let mut i = 0;
    while i < 6 {
        out[i] = EXP_POLY[i] * E_HALF;
        i += 1;
    }
    out
}

/// `e^a` multiplied into each coefficient ahead of time.
const EXP_FOLDED: [f64; 6] = fold_exp_coeffs();

/// `ln(1 + t) ≈ Σ c_p t^(p+1)` for `t ∈ [0, 1)`, constant term pinned to zero.
/// Regenerate with `scripts/fit_log_poly.py`; max abs error 1.17e-5.
pub const LN1P_COEFFS: [f64; 5] = [
    0.9994349844843184,
    -0.4913479270692511,
    0.28782628942392463,
    -0.134135433422111,
    0.03137758938716022,
];

const WORK_FRAC: u32 = 24;
const WORK_ONE: i64 = 1 << WORK_FRAC;

const fn to_work(x: f64) -> i64 {
    let scaled = x * WORK_ONE as f64;
    if scaled >= 0.0 {
        (scaled + 0.5) as i64
    } else {
        (scaled - 0.5) as i64
    }
}

const LN2_W: i64 = to_work(LN_2);

const EXP_FOLDED_W: [i64; 6] = [
    to_work(EXP_FOLDED[0]),
    to_work(EXP_FOLDED[1]),
    to_work(EXP_FOLDED[2]),
    to_work(EXP_FOLDED[3]),
    to_work(EXP_FOLDED[4]),
    to_work(EXP_FOLDED[5]),
];

const LN1P_W: [i64; 5] = [
    to_work(LN1P_COEFFS[0]),
    to_work(LN1P_COEFFS[1]),
    to_work(LN1P_COEFFS[2]),
    to_work(LN1P_COEFFS[3]),
    to_work(LN1P_COEFFS[4]),
];

fn exp_poly(r: f64) -> f64 {
    let c = &EXP_FOLDED;
    c[0] + r * (c[1] + r * (c[2] + r * (c[3] + r * (c[4] + r * c[5]))))
}

fn ln_mantissa(m: f64) -> f64 {
    let t = m - 1.0;
    let c = &LN1P_COEFFS;
    t * (c[0] + t * (c[1] + t * (c[2] + t * (c[3] + t * c[4]))))
}

/// Approximate `e^x`.
pub fn exp_approx(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x == f64::INFINITY {
        return f64::INFINITY;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    let k = (x * LOG2_E).floor();
    let mut r = x - k * LN_2;
    // k·ln2 is inexact in f64; keep r inside the expansion interval
    if r < 0.0 {
        r = 0.0;
    }
    let k = k.clamp(-2000.0, 2000.0) as i32;
    exp_poly(r) * pow2(k)
}

fn pow2(k: i32) -> f64 {
    // split so that intermediate powers stay finite/normal
    let half = k / 2;
    2f64.powi(half) * 2f64.powi(k - half)
}

/// Approximate natural logarithm; `x` must be positive.
pub fn log_approx(x: f64) -> Result<f64, FxpError> {
    if x.is_nan() || x <= 0.0 {
        return Err(FxpError::Domain("log of a non-positive value"));
    }
    if x.is_infinite() {
        return Ok(f64::INFINITY);
    }
    let (m, e) = frexp1(x);
    Ok(f64::from(e) * LN_2 + ln_mantissa(m))
}

/// Splits a positive finite `x` into `m·2^e`, `m ∈ [1, 2)`.
fn frexp1(x: f64) -> (f64, i32) {
    const MANTISSA: u64 = (1 << 52) - 1;
    let (x, bias) = if x < f64::MIN_POSITIVE {
        (x * 2f64.powi(54), 54)
    } else {
        (x, 0)
    };
    let bits = x.to_bits();
    let e = ((bits >> 52) & 0x7ff) as i32 - 1023 - bias;
    let m = f64::from_bits((bits & MANTISSA) | (1023u64 << 52));
    (m, e)
}

/// `a / b` as `exp(log|a| − log b)` with the sign of `a` reattached. A zero
/// numerator bypasses the approximation and returns exactly zero.
pub fn div_approx(a: f64, b: f64) -> Result<f64, FxpError> {
    if b.is_nan() || b <= 0.0 {
        return Err(FxpError::Domain("division by a non-positive value"));
    }
    if a == 0.0 {
        return Ok(0.0);
    }
    let q = exp_approx(log_approx(a.abs())? - log_approx(b)?);
    Ok(if a < 0.0 { -q } else { q })
}

/// Range-reduced polynomial in the Q24 working register. Returns the
/// mantissa (Q24) and the power-of-two exponent.
fn exp_wide(x: i64) -> (i64, i64) {
    let k = x.div_euclid(LN2_W);
    let r = i128::from(x.rem_euclid(LN2_W));
    let c = &EXP_FOLDED_W;
    let mut acc = i128::from(c[5]);
    for &coef in c[..5].iter().rev() {
        acc = round_shift(acc * r, WORK_FRAC) + i128::from(coef);
    }
    (acc as i64, k)
}

/// `ln` of a positive raw value with `frac` fraction bits, in Q24.
fn log_wide(raw: i64, frac: u32) -> i64 {
    debug_assert!(raw > 0);
    let msb = 63 - raw.leading_zeros() as i64;
    let mut e = msb - i64::from(frac);
    let mut m = if msb <= i64::from(WORK_FRAC) {
        raw << (i64::from(WORK_FRAC) - msb)
    } else {
        round_shift(i128::from(raw), (msb - i64::from(WORK_FRAC)) as u32) as i64
    };
    if m >= 2 * WORK_ONE {
        m >>= 1;
        e += 1;
    }
    let t = i128::from(m - WORK_ONE);
    let c = &LN1P_W;
    let mut acc = i128::from(c[4]);
    for &coef in c[..4].iter().rev() {
        acc = round_shift(acc * t, WORK_FRAC) + i128::from(coef);
    }
    let poly = round_shift(acc * t, WORK_FRAC) as i64;
    e * LN2_W + poly
}

/// `mant · 2^(k − 24)` rounded into `fmt`.
fn scale_to_fx(mant: i64, k: i64, fmt: FxFormat) -> (Fx16, bool) {
    let shift = k - i64::from(WORK_FRAC) + i64::from(fmt.frac_bits());
    let value = if shift >= 0 {
        if shift > 64 {
            match mant.signum() {
                0 => 0,
                1 => i128::MAX,
                _ => i128::MIN,
            }
        } else {
            i128::from(mant) << shift
        }
    } else {
        round_shift(i128::from(mant), (-shift).min(126) as u32)
    };
    let (raw, overflow) = saturate(value);
    (Fx16::from_raw(raw, fmt), overflow)
}

fn work_to_fx(value: i64, fmt: FxFormat) -> (Fx16, bool) {
    let rounded = round_shift(i128::from(value), WORK_FRAC - fmt.frac_bits());
    let (raw, overflow) = saturate(rounded);
    (Fx16::from_raw(raw, fmt), overflow)
}

fn fx_to_work(x: Fx16) -> i64 {
    i64::from(x.raw()) << (WORK_FRAC - x.format().frac_bits())
}

/// Fixed-point `exp` plus a saturation flag.
pub fn fx_exp_approx_flagged(x: Fx16) -> (Fx16, bool) {
    let (mant, k) = exp_wide(fx_to_work(x));
    scale_to_fx(mant, k, x.format())
}

fn round_div(num: i128, den: i128) -> i128 {
    debug_assert!(den > 0);
    let q = num.div_euclid(den);
    let r = num.rem_euclid(den);
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q & 1),
    }
}

/// Transcendental primitives available to both numeric carriers.
///
/// `*_approx` are the polynomial versions; `*_exact` model the conventional
/// units they replace (used by the reference routing path).
pub trait HwMath: Scalar {
    fn exp_approx(self) -> Self;
    fn log_approx(self) -> Result<Self, FxpError>;
    fn div_approx(self, rhs: Self) -> Result<Self, FxpError>;
    fn exp_exact(self) -> Self;
    fn div_exact(self, rhs: Self) -> Result<Self, FxpError>;
}

impl HwMath for f64 {
    fn exp_approx(self) -> f64 {
        exp_approx(self)
    }

    fn log_approx(self) -> Result<f64, FxpError> {
        log_approx(self)
    }

    fn div_approx(self, rhs: f64) -> Result<f64, FxpError> {
        div_approx(self, rhs)
    }

    fn exp_exact(self) -> f64 {
        self.exp()
    }

    fn div_exact(self, rhs: f64) -> Result<f64, FxpError> {
        if rhs.is_nan() || rhs <= 0.0 {
            return Err(FxpError::Domain("division by a non-positive value"));
        }
        Ok(self / rhs)
    }
}

impl HwMath for Fx16 {
    fn exp_approx(self) -> Fx16 {
        fx_exp_approx_flagged(self).0
    }

    fn log_approx(self) -> Result<Fx16, FxpError> {
        if self.raw() <= 0 {
            return Err(FxpError::Domain("log of a non-positive value"));
        }
        let ln = log_wide(i64::from(self.raw()), self.format().frac_bits());
        Ok(work_to_fx(ln, self.format()).0)
    }

    fn div_approx(self, rhs: Fx16) -> Result<Fx16, FxpError> {
        if self.format() != rhs.format() {
            return Err(FxpError::FormatMismatch {
                left: self.format(),
                right: rhs.format(),
            });
        }
        if rhs.raw() <= 0 {
            return Err(FxpError::Domain("division by a non-positive value"));
        }
        if self.raw() == 0 {
            return Ok(self);
        }
        let frac = self.format().frac_bits();
        let a = i64::from(self.raw()).abs();
        let diff = log_wide(a, frac) - log_wide(i64::from(rhs.raw()), frac);
        let (mant, k) = exp_wide(diff);
        let mant = if self.raw() < 0 { -mant } else { mant };
        Ok(scale_to_fx(mant, k, self.format()).0)
    }

    fn exp_exact(self) -> Fx16 {
        super::quantize(self.to_f64().exp(), self.format())
    }

    fn div_exact(self, rhs: Fx16) -> Result<Fx16, FxpError> {
        if self.format() != rhs.format() {
            return Err(FxpError::FormatMismatch {
                left: self.format(),
                right: rhs.format(),
            });
        }
        if rhs.raw() <= 0 {
            return Err(FxpError::Domain("division by a non-positive value"));
        }
        let num = i128::from(self.raw()) << self.format().frac_bits();
        let (raw, _) = saturate(round_div(num, i128::from(rhs.raw())));
        Ok(Fx16::from_raw(raw, self.format()))
    }
}

fn softmax_with<T: HwMath>(v: &[T], exp: impl Fn(T) -> T, div: impl Fn(T, T) -> Result<T, FxpError>) -> Vec<T> {
    let Some(&first) = v.first() else {
        return Vec::new();
    };
    let max = v.iter().fold(first, |m, &x| m.max(x));
    let exps: Vec<T> = v.iter().map(|&x| exp(x.sub(max))).collect();
    let sum = exps.iter().skip(1).fold(exps[0], |s, &e| s.add(e));
    exps.into_iter()
        // the maximum contributes exp(0) ≈ 1, so the sum is positive
        .map(|e| div(e, sum).expect("softmax denominator is positive"))
        .collect()
}

/// Max-subtracted softmax built from [`HwMath::exp_approx`] and
/// [`HwMath::div_approx`].
pub fn softmax_approx<T: HwMath>(v: &[T]) -> Vec<T> {
    softmax_with(v, T::exp_approx, T::div_approx)
}

/// Max-subtracted softmax with the conventional `exp` and divider.
pub fn softmax_exact<T: HwMath>(v: &[T]) -> Vec<T> {
    softmax_with(v, T::exp_exact, T::div_exact)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxp::quantize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    fn exact_softmax(v: &[f64]) -> Vec<f64> {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    fn argmax(v: &[f64]) -> usize {
        let mut best = 0;
        for (i, &x) in v.iter().enumerate() {
            if x > v[best] {
                best = i;
            }
        }
        best
    }

    #[test]
    fn printed_polynomial_alone() {
        // e^a·P(0) with the verbatim leading coefficient
        assert!(rel(E_HALF * EXP_POLY[0], 1.0) < 1e-4);
        assert!((E_HALF - EXP_CENTER.exp()).abs() < 1e-15);
    }

    #[test]
    fn exp_examples() {
        assert!(rel(exp_approx(0.0), 1.0) < 1e-4);
        assert!(rel(exp_approx(0.5), 0.5f64.exp()) < 1e-4);
        assert!(rel(exp_approx(-10.0), (-10f64).exp()) < 1e-3);
        assert!((exp_approx(-10.0) - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn exp_positive_and_monotone() {
        let mut prev = 0.0;
        for i in 0..10_000 {
            let x = -20.0 + 25.0 * i as f64 / 9_999.0;
            let y = exp_approx(x);
            assert!(y > 0.0);
            assert!(y > prev, "not increasing at {x}");
            prev = y;
        }
    }

    #[test]
    fn log_examples() {
        assert!(log_approx(1.0).unwrap().abs() < 1e-3);
        assert!((log_approx(2.0).unwrap() - LN_2).abs() < 1e-3);
        assert!(matches!(log_approx(0.0), Err(FxpError::Domain(_))));
        assert!(log_approx(-3.0).is_err());
        assert!((log_approx(1e-310).unwrap() - 1e-310f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn exp_of_log_round_trip() {
        for i in 0..2000 {
            let x = 10f64.powf(-3.0 + 6.0 * i as f64 / 1999.0);
            assert!(rel(exp_approx(log_approx(x).unwrap()), x) <= 1e-2);
        }
    }

    #[test]
    fn div_examples() {
        assert!((div_approx(1.0, 1.0).unwrap() - 1.0).abs() < 1e-3);
        assert!(rel(div_approx(6.0, 3.0).unwrap(), 6.0 / 3.0) < 1e-2);
        assert_eq!(div_approx(0.0, 5.0).unwrap(), 0.0);
        assert!(rel(div_approx(-6.0, 3.0).unwrap(), -2.0) < 1e-2);
        assert!(div_approx(1.0, 0.0).is_err());
        assert!(div_approx(1.0, -2.0).is_err());
    }

    #[test]
    fn softmax_examples() {
        let uniform = softmax_approx(&[0.0; 10]);
        for p in &uniform {
            assert!((p - 0.1).abs() < 1e-3);
        }
        let two = softmax_approx(&[1.0, 0.0]);
        let oracle = exact_softmax(&[1.0, 0.0]);
        assert!((two[0] - oracle[0]).abs() < 5e-3);
        assert!((two[1] - oracle[1]).abs() < 5e-3);
        assert!((oracle[0] - 0.7311).abs() < 1e-4);
        assert!(softmax_approx::<f64>(&[]).is_empty());
    }

    #[test]
    fn softmax_preserves_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let v: Vec<f64> = (0..10).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let p = softmax_approx(&v);
            let s: f64 = p.iter().sum();
            assert!((s - 1.0).abs() <= 1e-3);
            assert!(p.iter().all(|&x| x >= 0.0));
            assert_eq!(argmax(&p), argmax(&exact_softmax(&v)));
        }
    }

    #[test]
    fn fixed_exp_tracks_real() {
        let fmt = FxFormat::Q8_8;
        for raw in -2048..1100i16 {
            let x = Fx16::from_raw(raw, fmt);
            let got = x.exp_approx().to_f64();
            let want = x.to_f64().exp();
            // polynomial error plus half an LSB of output rounding
            assert!(
                (got - want).abs() <= want * 1e-4 + fmt.resolution() / 2.0 + 1e-12,
                "{x}"
            );
        }
    }

    #[test]
    fn fixed_exp_saturates_with_flag() {
        let fmt = FxFormat::Q8_8;
        let (y, flag) = fx_exp_approx_flagged(quantize(10.0, fmt));
        assert_eq!(y.raw(), i16::MAX);
        assert!(flag);
        let (y, flag) = fx_exp_approx_flagged(quantize(1.0, fmt));
        assert!(!flag);
        assert!((y.to_f64() - 1f64.exp()).abs() < 1e-2);
    }

    #[test]
    fn fixed_log_and_div() {
        let fmt = FxFormat::new(10).unwrap();
        let one = quantize(1.0, fmt);
        assert_eq!(one.log_approx().unwrap().raw(), 0);
        let two = quantize(2.0, fmt);
        assert!((two.log_approx().unwrap().to_f64() - LN_2).abs() < 1e-3);
        assert!(Fx16::zero(fmt).log_approx().is_err());

        let six = quantize(6.0, fmt);
        let three = quantize(3.0, fmt);
        assert!(rel(six.div_approx(three).unwrap().to_f64(), 2.0) < 1e-2);
        assert_eq!(Fx16::zero(fmt).div_approx(three).unwrap().raw(), 0);
        assert!(six.div_approx(Fx16::zero(fmt)).is_err());
        assert!(rel((-six).div_approx(three).unwrap().to_f64(), -2.0) < 1e-2);
        assert_eq!(six.div_exact(three).unwrap(), two);
    }

    #[test]
    fn fixed_div_relative_error() {
        let fmt = FxFormat::Q8_8;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5000 {
            let a = quantize(rng.gen_range(0.5..100.0), fmt);
            let b = quantize(rng.gen_range(0.5..100.0), fmt);
            let exact = a.to_f64() / b.to_f64();
            if !(0.5..100.0).contains(&exact) {
                continue;
            }
            let got = a.div_approx(b).unwrap().to_f64();
            assert!((got - exact).abs() <= exact * 1e-3 + fmt.resolution(), "{a}/{b}");
        }
    }

    #[test]
    fn fixed_softmax_rows_sum_to_one() {
        let fmt = FxFormat::new(12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let v: Vec<Fx16> = (0..10).map(|_| quantize(rng.gen_range(-4.0..4.0), fmt)).collect();
            let p = softmax_approx(&v);
            let s: f64 = p.iter().map(|x| x.to_f64()).sum();
            assert!((s - 1.0).abs() <= 10.0 * fmt.resolution());
            assert!(p.iter().all(|x| x.raw() >= 0));
        }
    }
}
