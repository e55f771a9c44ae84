use std::fmt::Debug;

use super::{quantize, Fx16, FxFormat, WideAcc};

/// Numeric carrier shared by the real (`f64`) and fixed-point ([`Fx16`])
/// pipelines.
///
/// Multiply-accumulate goes through an explicit accumulator type so that the
/// fixed-point path rounds exactly once per output, at [`Scalar::writeback`].
pub trait Scalar: Copy + Debug + PartialEq + PartialOrd + Send + Sync + 'static {
    /// `()` for reals, the Q-format for fixed point.
    type Format: Copy + Debug + PartialEq + Send + Sync;
    type Acc: Copy + Debug + PartialEq + Send + Sync;

    fn format(self) -> Self::Format;
    fn zero(fmt: Self::Format) -> Self;
    fn from_f64(x: f64, fmt: Self::Format) -> Self;
    fn to_f64(self) -> f64;

    fn acc_zero(fmt: Self::Format) -> Self::Acc;
    fn acc_load(self) -> Self::Acc;
    fn mac(acc: Self::Acc, a: Self, b: Self) -> Self::Acc;
    fn acc_to_f64(acc: Self::Acc) -> f64;
    fn writeback(acc: Self::Acc) -> Self;

    fn add(self, rhs: Self) -> Self;
    fn sub(self, rhs: Self) -> Self;

    fn relu(self) -> Self {
        let zero = Self::zero(self.format());
        if self > zero {
            self
        } else {
            zero
        }
    }

    fn max(self, rhs: Self) -> Self {
        if rhs > self {
            rhs
        } else {
            self
        }
    }
}

impl Scalar for f64 {
    type Format = ();
    type Acc = f64;

    fn format(self) {}

    fn zero(_: ()) -> f64 {
        0.0
    }

    fn from_f64(x: f64, _: ()) -> f64 {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn acc_zero(_: ()) -> f64 {
        0.0
    }

    fn acc_load(self) -> f64 {
        self
    }

    #[inline]
    fn mac(acc: f64, a: f64, b: f64) -> f64 {
        acc + a * b
    }

    fn acc_to_f64(acc: f64) -> f64 {
        acc
    }

    fn writeback(acc: f64) -> f64 {
        acc
    }

    fn add(self, rhs: f64) -> f64 {
        self + rhs
    }

    fn sub(self, rhs: f64) -> f64 {
        self - rhs
    }
}

impl Scalar for Fx16 {
    type Format = FxFormat;
    type Acc = WideAcc;

    fn format(self) -> FxFormat {
        Fx16::format(self)
    }

    fn zero(fmt: FxFormat) -> Fx16 {
        Fx16::zero(fmt)
    }

    fn from_f64(x: f64, fmt: FxFormat) -> Fx16 {
        quantize(x, fmt)
    }

    fn to_f64(self) -> f64 {
        Fx16::to_f64(self)
    }

    fn acc_zero(fmt: FxFormat) -> WideAcc {
        WideAcc::zero(fmt)
    }

    fn acc_load(self) -> WideAcc {
        WideAcc::from_fx(self)
    }

    #[inline]
    fn mac(acc: WideAcc, a: Fx16, b: Fx16) -> WideAcc {
        acc.mac(a, b)
    }

    fn acc_to_f64(acc: WideAcc) -> f64 {
        acc.to_f64()
    }

    fn writeback(acc: WideAcc) -> Fx16 {
        acc.writeback()
    }

    fn add(self, rhs: Fx16) -> Fx16 {
        self + rhs
    }

    fn sub(self, rhs: Fx16) -> Fx16 {
        self - rhs
    }
}
