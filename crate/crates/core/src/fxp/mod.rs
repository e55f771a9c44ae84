//! 16-bit fixed-point arithmetic.
//!
//! [`Fx16`] is a signed 16-bit value with a runtime [`FxFormat`] (the number of
//! fraction bits). Products are accumulated exactly in a [`WideAcc`] and rounded
//! once, half-to-even, when written back. Every writeback saturates at the
//! format limits; the `*_flagged` variants report whether that happened.
//!
//! Arithmetic between values of different formats is a contract violation:
//! the `try_*` methods return [`FxpError::FormatMismatch`], the operator
//! overloads panic.

mod approx;
mod scalar;

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use thiserror::Error;

pub use approx::{
    div_approx, exp_approx, fx_exp_approx_flagged, log_approx, softmax_approx, softmax_exact, HwMath, EXP_CENTER,
    EXP_POLY, LN1P_COEFFS,
};
pub use scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FxpError {
    #[error("fraction bits must be in 1..=15, got {0}")]
    InvalidFormat(u32),
    #[error("fixed-point format mismatch: {left} vs {right}")]
    FormatMismatch { left: FxFormat, right: FxFormat },
    #[error("wide accumulator overflow")]
    AccumulatorOverflow,
    #[error("domain error: {0}")]
    Domain(&'static str),
}

/// A 16-bit two's complement Q-format, `Q(16 - frac_bits).frac_bits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FxFormat {
    frac_bits: u8,
}

impl FxFormat {
    pub const TOTAL_BITS: u32 = 16;
    pub const Q8_8: FxFormat = FxFormat { frac_bits: 8 };

    pub fn new(frac_bits: u32) -> Result<Self, FxpError> {
        if (1..=15).contains(&frac_bits) {
            Ok(FxFormat {
                frac_bits: frac_bits as u8,
            })
        } else {
            Err(FxpError::InvalidFormat(frac_bits))
        }
    }

    pub fn frac_bits(self) -> u32 {
        u32::from(self.frac_bits)
    }

    pub fn total_bits(self) -> u32 {
        Self::TOTAL_BITS
    }

    /// Weight of one least significant bit.
    pub fn resolution(self) -> f64 {
        (-(self.frac_bits() as f64)).exp2()
    }

    pub fn min_value(self) -> f64 {
        f64::from(i16::MIN) * self.resolution()
    }

    pub fn max_value(self) -> f64 {
        f64::from(i16::MAX) * self.resolution()
    }
}

impl Default for FxFormat {
    fn default() -> Self {
        Self::Q8_8
    }
}

impl fmt::Display for FxFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}.{}", 16 - self.frac_bits, self.frac_bits)
    }
}

/// Divides by `2^shift`, rounding half to even. `shift == 0` is the identity.
pub(crate) fn round_shift(value: i128, shift: u32) -> i128 {
    if shift == 0 {
        return value;
    }
    if shift >= 127 {
        return 0;
    }
    let floor = value >> shift;
    let rem = value - (floor << shift);
    let half = 1i128 << (shift - 1);
    match rem.cmp(&half) {
        Ordering::Less => floor,
        Ordering::Greater => floor + 1,
        Ordering::Equal => floor + (floor & 1),
    }
}

/// Clamps to the i16 range, reporting whether clamping occurred.
pub(crate) fn saturate(value: i128) -> (i16, bool) {
    if value > i128::from(i16::MAX) {
        (i16::MAX, true)
    } else if value < i128::from(i16::MIN) {
        (i16::MIN, true)
    } else {
        (value as i16, false)
    }
}

/// Nearest representable value (ties to even); saturates out-of-range input.
pub fn quantize(x: f64, fmt: FxFormat) -> Fx16 {
    quantize_flagged(x, fmt).0
}

/// [`quantize`] plus an overflow flag. NaN maps to zero and is flagged.
pub fn quantize_flagged(x: f64, fmt: FxFormat) -> (Fx16, bool) {
    if x.is_nan() {
        return (Fx16::zero(fmt), true);
    }
    let scaled = x * (fmt.frac_bits() as f64).exp2();
    let rounded = scaled.round_ties_even();
    let (raw, overflow) = if rounded >= f64::from(i16::MAX) {
        (i16::MAX, rounded > f64::from(i16::MAX))
    } else if rounded <= f64::from(i16::MIN) {
        (i16::MIN, rounded < f64::from(i16::MIN))
    } else {
        (rounded as i16, false)
    };
    (Fx16 { raw, fmt }, overflow)
}

/// Checked multiply-accumulate: `acc + a·b` exactly, or an error on a format
/// mismatch or accumulator overflow.
pub fn fx_mac(acc: WideAcc, a: Fx16, b: Fx16) -> Result<WideAcc, FxpError> {
    acc.checked_mac(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fx16 {
    raw: i16,
    fmt: FxFormat,
}

impl Fx16 {
    pub fn from_raw(raw: i16, fmt: FxFormat) -> Self {
        Fx16 { raw, fmt }
    }

    pub fn zero(fmt: FxFormat) -> Self {
        Fx16 { raw: 0, fmt }
    }

    pub fn one(fmt: FxFormat) -> Self {
        Fx16 {
            raw: 1 << fmt.frac_bits(),
            fmt,
        }
    }

    pub fn raw(self) -> i16 {
        self.raw
    }

    pub fn format(self) -> FxFormat {
        self.fmt
    }

    pub fn to_f64(self) -> f64 {
        f64::from(self.raw) * self.fmt.resolution()
    }

    fn check(self, rhs: Fx16) -> Result<(), FxpError> {
        if self.fmt == rhs.fmt {
            Ok(())
        } else {
            Err(FxpError::FormatMismatch {
                left: self.fmt,
                right: rhs.fmt,
            })
        }
    }

    pub fn try_add(self, rhs: Fx16) -> Result<Fx16, FxpError> {
        self.check(rhs)?;
        let (raw, _) = saturate(i128::from(self.raw) + i128::from(rhs.raw));
        Ok(Fx16 { raw, fmt: self.fmt })
    }

    pub fn try_sub(self, rhs: Fx16) -> Result<Fx16, FxpError> {
        self.check(rhs)?;
        let (raw, _) = saturate(i128::from(self.raw) - i128::from(rhs.raw));
        Ok(Fx16 { raw, fmt: self.fmt })
    }

    pub fn try_mul(self, rhs: Fx16) -> Result<Fx16, FxpError> {
        Ok(WideAcc::zero(self.fmt).checked_mac(self, rhs)?.writeback())
    }

    pub fn saturating_neg(self) -> Fx16 {
        let (raw, _) = saturate(-i128::from(self.raw));
        Fx16 { raw, fmt: self.fmt }
    }
}

impl PartialOrd for Fx16 {
    /// Values in different formats are unordered.
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        (self.fmt == other.fmt).then(|| self.raw.cmp(&other.raw))
    }
}

impl fmt::Display for Fx16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_f64())
    }
}

macro_rules! fx_binop {
    ($trait:ident, $method:ident, $checked:ident) => {
        impl $trait for Fx16 {
            type Output = Fx16;

            fn $method(self, rhs: Fx16) -> Fx16 {
                match self.$checked(rhs) {
                    Ok(v) => v,
                    Err(e) => panic!("{e}"),
                }
            }
        }
    };
}

fx_binop!(Add, add, try_add);
fx_binop!(Sub, sub, try_sub);
fx_binop!(Mul, mul, try_mul);

impl Neg for Fx16 {
    type Output = Fx16;

    fn neg(self) -> Fx16 {
        self.saturating_neg()
    }
}

/// Exact product accumulator with `2·frac_bits` fraction bits.
///
/// The raw register is 64 bits wide: one product of two `i16` values needs up
/// to 31 bits, so 2^15 accumulated products need 46.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WideAcc {
    raw: i64,
    fmt: FxFormat,
}

impl WideAcc {
    pub fn zero(fmt: FxFormat) -> Self {
        WideAcc { raw: 0, fmt }
    }

    /// Loads `x` into the accumulator without loss.
    pub fn from_fx(x: Fx16) -> Self {
        WideAcc {
            raw: i64::from(x.raw) << x.fmt.frac_bits(),
            fmt: x.fmt,
        }
    }

    pub fn raw(self) -> i64 {
        self.raw
    }

    /// Format of the operands; the accumulator itself holds twice as many
    /// fraction bits.
    pub fn operand_format(self) -> FxFormat {
        self.fmt
    }

    pub fn frac_bits(self) -> u32 {
        2 * self.fmt.frac_bits()
    }

    pub fn to_f64(self) -> f64 {
        self.raw as f64 * (-(self.frac_bits() as f64)).exp2()
    }

    pub fn checked_mac(self, a: Fx16, b: Fx16) -> Result<WideAcc, FxpError> {
        a.check(b)?;
        if a.fmt != self.fmt {
            return Err(FxpError::FormatMismatch {
                left: self.fmt,
                right: a.fmt,
            });
        }
        let product = i64::from(a.raw) * i64::from(b.raw);
        let raw = self.raw.checked_add(product).ok_or(FxpError::AccumulatorOverflow)?;
        Ok(WideAcc { raw, fmt: self.fmt })
    }

    /// Unchecked-mode MAC. Panics on the contract violations `checked_mac`
    /// reports.
    pub fn mac(self, a: Fx16, b: Fx16) -> WideAcc {
        match self.checked_mac(a, b) {
            Ok(acc) => acc,
            Err(e) => panic!("{e}"),
        }
    }

    pub fn checked_add(self, rhs: WideAcc) -> Result<WideAcc, FxpError> {
        if self.fmt != rhs.fmt {
            return Err(FxpError::FormatMismatch {
                left: self.fmt,
                right: rhs.fmt,
            });
        }
        let raw = self.raw.checked_add(rhs.raw).ok_or(FxpError::AccumulatorOverflow)?;
        Ok(WideAcc { raw, fmt: self.fmt })
    }

    /// Rounds half to even into the operand format, saturating.
    pub fn writeback(self) -> Fx16 {
        self.writeback_flagged().0
    }

    pub fn writeback_flagged(self) -> (Fx16, bool) {
        let shifted = round_shift(i128::from(self.raw), self.fmt.frac_bits());
        let (raw, overflow) = saturate(shifted);
        (Fx16 { raw, fmt: self.fmt }, overflow)
    }
}
