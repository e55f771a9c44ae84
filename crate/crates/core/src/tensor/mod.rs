//! Dense row-major tensors and the valid-padding convolution used by the
//! CapsNet feature extractor.

mod conv;

pub use conv::{conv2d, conv2d_counted, count_mac_ops, ConvLayerWeights};

use crate::error::{Error, Result};
use crate::fxp::{quantize, Fx16, FxFormat, Scalar};

/// A dense tensor. `product(dims) == data.len()` and, in fixed point, every
/// element carries the same format.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(first) = data.first() {
            let fmt = first.format();
            if data.iter().any(|x| x.format() != fmt) {
                return Err(Error::shape("tensor elements use mixed fixed-point formats"));
            }
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>, fmt: T::Format) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims,
            data: vec![T::zero(fmt); n],
        }
    }

    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let n: usize = dims.iter().product();
        Self::from_vec(dims, (0..n).map(&mut f).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The shared element format, if there is at least one element.
    pub fn format(&self) -> Option<T::Format> {
        self.data.first().map(|x| x.format())
    }

    /// Row-major offset of a multi-index. Panics when out of bounds.
    pub fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.dims.len(), "index rank");
        idx.iter().zip(&self.dims).fold(0, |off, (&i, &d)| {
            assert!(i < d, "index {idx:?} out of bounds for {:?}", self.dims);
            off * d + i
        })
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Self::from_vec(dims, self.data)
    }

    pub fn map<U: Scalar>(&self, f: impl FnMut(T) -> U) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    pub fn to_real(&self) -> Tensor<f64> {
        self.map(Scalar::to_f64)
    }

    pub(crate) fn expect_dims(&self, what: &str, dims: &[usize]) -> Result<()> {
        if self.dims == dims {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: expected dims {dims:?}, got {:?}",
                self.dims
            )))
        }
    }
}

impl Tensor<f64> {
    pub fn quantize(&self, fmt: FxFormat) -> Tensor<Fx16> {
        self.map(|x| quantize(x, fmt))
    }
}

/// Errors unless two tensors share a fixed-point format (a no-op for reals).
pub(crate) fn check_same_format<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    match (a.format(), b.format()) {
        (Some(fa), Some(fb)) if fa != fb => Err(Error::shape(format!(
            "{what}: operands use different fixed-point formats ({fa:?} vs {fb:?})"
        ))),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::from_vec(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.get(&[1, 2]), 5.0);
        assert_eq!(t.offset(&[1, 0]), 3);
    }

    #[test]
    fn mixed_formats_rejected() {
        let a = quantize(1.0, FxFormat::Q8_8);
        let b = quantize(1.0, FxFormat::new(4).unwrap());
        assert!(Tensor::from_vec(vec![2], vec![a, b]).is_err());
    }

    #[test]
    fn quantize_round_trip() {
        let t = Tensor::from_vec(vec![3], vec![0.5, -1.25, 2.0]).unwrap();
        assert_eq!(t.quantize(FxFormat::Q8_8).to_real(), t);
    }
}
