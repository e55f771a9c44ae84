use rayon::prelude::*;

use super::{check_same_format, Tensor};
use crate::error::{Error, Result};
use crate::fxp::Scalar;
use crate::pruning::{KernelIndexTable, LayerMask};

/// Weights of one convolution: kernels `(C_out, C_in, k, k)`, bias `(C_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerWeights<T> {
    kernels: Tensor<T>,
    bias: Tensor<T>,
    stride: usize,
}

impl<T: Scalar> ConvLayerWeights<T> {
    pub fn new(kernels: Tensor<T>, bias: Tensor<T>, stride: usize) -> Result<Self> {
        let d = kernels.dims();
        if d.len() != 4 {
            return Err(Error::shape(format!("conv kernels must be 4-D, got {d:?}")));
        }
        if d[2] != d[3] || d[2] == 0 {
            return Err(Error::shape(format!("conv kernels must be square, got {d:?}")));
        }
        bias.expect_dims("conv bias", &[d[0]])?;
        check_same_format(&kernels, &bias, "conv weights")?;
        if stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be at least 1".into()));
        }
        Ok(ConvLayerWeights { kernels, bias, stride })
    }

    pub fn kernels(&self) -> &Tensor<T> {
        &self.kernels
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.dims()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.dims()[2]
    }

    /// Output spatial extent for a valid (unpadded) convolution.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel_size();
        if h < k || w < k {
            return Err(Error::shape(format!("input {h}x{w} smaller than {k}x{k} kernel")));
        }
        Ok(((h - k) / self.stride + 1, (w - k) / self.stride + 1))
    }

    pub fn map<U: Scalar>(&self, mut f: impl FnMut(T) -> U) -> ConvLayerWeights<U> {
        ConvLayerWeights {
            kernels: self.kernels.map(&mut f),
            bias: self.bias.map(f),
            stride: self.stride,
        }
    }
}

/// Valid cross-correlation plus bias over a `(C_in, H, W)` input.
///
/// Kernels masked out by `mask` are skipped through a surviving-kernel index
/// table; they contribute exactly nothing.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &ConvLayerWeights<T>,
    mask: Option<&LayerMask>,
) -> Result<Tensor<T>> {
    conv2d_counted(input, weights, mask).map(|(t, _)| t)
}

/// [`conv2d`] that also returns the number of scalar MACs executed.
pub fn conv2d_counted<T: Scalar>(
    input: &Tensor<T>,
    weights: &ConvLayerWeights<T>,
    mask: Option<&LayerMask>,
) -> Result<(Tensor<T>, u64)> {
    let d = input.dims();
    if d.len() != 3 {
        return Err(Error::shape(format!("conv input must be (C, H, W), got {d:?}")));
    }
    let (c_in, h, w) = (d[0], d[1], d[2]);
    if c_in != weights.in_channels() {
        return Err(Error::shape(format!(
            "conv input has {c_in} channels, kernels expect {}",
            weights.in_channels()
        )));
    }
    check_same_format(input, weights.kernels(), "conv2d")?;
    let c_out = weights.out_channels();
    let k = weights.kernel_size();
    let s = weights.stride();
    let (oh, ow) = weights.output_hw(h, w)?;
    let table = KernelIndexTable::new(mask, c_out, c_in)?;

    let kern = weights.kernels().data();
    let bias = weights.bias().data();
    let src = input.data();
    let plane = oh * ow;

    let channels: Vec<(Vec<T>, u64)> = (0..c_out)
        .into_par_iter()
        .map(|o| {
            let mut acc = vec![bias[o].acc_load(); plane];
            let mut macs = 0u64;
            for &c in table.inputs(o) {
                let c = c as usize;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = kern[((o * c_in + c) * k + ky) * k + kx];
                        for y in 0..oh {
                            let row = (c * h + y * s + ky) * w + kx;
                            let out = &mut acc[y * ow..(y + 1) * ow];
                            for (x, a) in out.iter_mut().enumerate() {
                                *a = T::mac(*a, wv, src[row + x * s]);
                            }
                        }
                    }
                }
                macs += (plane * k * k) as u64;
            }
            (acc.into_iter().map(T::writeback).collect(), macs)
        })
        .collect();

    let mut data = Vec::with_capacity(c_out * plane);
    let mut total = 0;
    for (chan, macs) in channels {
        data.extend(chan);
        total += macs;
    }
    Ok((Tensor::from_vec(vec![c_out, oh, ow], data)?, total))
}

/// Closed-form MAC count of [`conv2d`] for an input of shape `in_shape`.
pub fn count_mac_ops<T: Scalar>(
    weights: &ConvLayerWeights<T>,
    mask: Option<&LayerMask>,
    in_shape: (usize, usize, usize),
) -> Result<u64> {
    let (c_in, h, w) = in_shape;
    if c_in != weights.in_channels() {
        return Err(Error::shape("input channels do not match kernels"));
    }
    let (oh, ow) = weights.output_hw(h, w)?;
    let table = KernelIndexTable::new(mask, weights.out_channels(), c_in)?;
    let k = weights.kernel_size() as u64;
    Ok(table.surviving() as u64 * k * k * (oh * ow) as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxp::{Fx16, FxFormat};
    use crate::pruning::Granularity;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    /// Straightforward six-loop convolution.
    fn naive_conv(input: &Tensor<f64>, kern: &Tensor<f64>, bias: &[f64], s: usize) -> Tensor<f64> {
        let (c_in, h, w) = (input.dims()[0], input.dims()[1], input.dims()[2]);
        let (c_out, k) = (kern.dims()[0], kern.dims()[2]);
        let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
        let mut out = Vec::new();
        for (o, &b) in bias.iter().enumerate().take(c_out) {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = b;
                    for c in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                acc += kern.get(&[o, c, ky, kx]) * input.get(&[c, y * s + ky, x * s + kx]);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        Tensor::from_vec(vec![c_out, oh, ow], out).unwrap()
    }

    fn layer(kern: Tensor<f64>, stride: usize) -> ConvLayerWeights<f64> {
        let c_out = kern.dims()[0];
        ConvLayerWeights::new(kern, Tensor::zeros(vec![c_out], ()), stride).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random(vec![1, 5, 7], &mut rng);
        let w = layer(Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap(), 1);
        assert_eq!(conv2d(&input, &w, None).unwrap().data(), input.data());
    }

    #[test]
    fn capsnet_geometry() {
        let input = Tensor::<f64>::zeros(vec![1, 28, 28], ());
        let c1 = layer(Tensor::zeros(vec![2, 1, 9, 9], ()), 1);
        let f = conv2d(&input, &c1, None).unwrap();
        assert_eq!(f.dims(), &[2, 20, 20]);
        let c2 = layer(Tensor::zeros(vec![3, 2, 9, 9], ()), 2);
        assert_eq!(conv2d(&f, &c2, None).unwrap().dims(), &[3, 6, 6]);
    }

    #[test]
    fn matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = random(vec![3, 8, 8], &mut rng);
        let kern = random(vec![4, 3, 3, 3], &mut rng);
        let bias: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for stride in [1, 2] {
            let w =
                ConvLayerWeights::new(kern.clone(), Tensor::from_vec(vec![4], bias.clone()).unwrap(), stride).unwrap();
            let got = conv2d(&input, &w, None).unwrap();
            let want = naive_conv(&input, &kern, &bias, stride);
            assert_eq!(got.dims(), want.dims());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mac_counts() {
        let w = layer(Tensor::zeros(vec![4, 3, 3, 3], ()), 1);
        assert_eq!(count_mac_ops(&w, None, (3, 8, 8)).unwrap(), 3888);
        assert_eq!(4 * 3 * 9 * 36, 3888);
        let units = (0..12).map(|i| i % 2 == 0).collect();
        let half = LayerMask::from_units("l", Granularity::Kernel, units);
        assert_eq!(count_mac_ops(&w, Some(&half), (3, 8, 8)).unwrap(), 1944);

        let conv1 = layer(Tensor::zeros(vec![256, 1, 9, 9], ()), 1);
        let (oh, ow) = conv1.output_hw(28, 28).unwrap();
        assert_eq!(
            count_mac_ops(&conv1, None, (1, 28, 28)).unwrap(),
            (256 * 81 * oh * ow) as u64
        );
        assert_eq!(count_mac_ops(&conv1, None, (1, 28, 28)).unwrap(), 8_294_400);
    }

    #[test]
    fn counter_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random(vec![3, 8, 8], &mut rng);
        let w = layer(random(vec![4, 3, 3, 3], &mut rng), 1);
        let units: Vec<bool> = (0..12).map(|_| rng.gen_bool(0.6)).collect();
        let mask = LayerMask::from_units("l", Granularity::Kernel, units);
        let (_, macs) = conv2d_counted(&input, &w, Some(&mask)).unwrap();
        assert_eq!(macs, count_mac_ops(&w, Some(&mask), (3, 8, 8)).unwrap());
    }

    #[test]
    fn masked_equals_zeroed_weights_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fmt = FxFormat::Q8_8;
        let input = random(vec![3, 8, 8], &mut rng).quantize(fmt);
        let kern = random(vec![4, 3, 3, 3], &mut rng);
        let bias = random(vec![4], &mut rng);
        let units: Vec<bool> = (0..12).map(|_| rng.gen_bool(0.5)).collect();
        let mask = LayerMask::from_units("l", Granularity::Kernel, units.clone());

        let zeroed: Vec<f64> = kern
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if units[i / 9] { v } else { 0.0 })
            .collect();
        let w = ConvLayerWeights::new(kern.quantize(fmt), bias.quantize(fmt), 1).unwrap();
        let wz = ConvLayerWeights::new(
            Tensor::from_vec(vec![4, 3, 3, 3], zeroed).unwrap().quantize(fmt),
            bias.quantize(fmt),
            1,
        )
        .unwrap();
        let masked: Tensor<Fx16> = conv2d(&input, &w, Some(&mask)).unwrap();
        assert_eq!(masked, conv2d(&input, &wz, None).unwrap());

        let all = LayerMask::all_alive("l", Granularity::Kernel, 12);
        assert_eq!(
            conv2d(&input, &w, Some(&all)).unwrap(),
            conv2d(&input, &w, None).unwrap()
        );
    }

    #[test]
    fn linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(vec![3, 8, 8], &mut rng);
        let y = random(vec![3, 8, 8], &mut rng);
        let sum = Tensor::from_vec(
            vec![3, 8, 8],
            x.data().iter().zip(y.data()).map(|(a, b)| a + b).collect(),
        )
        .unwrap();
        let w = ConvLayerWeights::new(random(vec![4, 3, 3, 3], &mut rng), random(vec![4], &mut rng), 1).unwrap();
        let (cx, cy, cs) = (
            conv2d(&x, &w, None).unwrap(),
            conv2d(&y, &w, None).unwrap(),
            conv2d(&sum, &w, None).unwrap(),
        );
        let per_plane = cs.len() / 4;
        for (i, v) in cs.data().iter().enumerate() {
            let b = w.bias().data()[i / per_plane];
            assert!((v - (cx.data()[i] + cy.data()[i] - b)).abs() < 1e-10);
        }
    }

    #[test]
    fn shape_errors() {
        let w = layer(Tensor::zeros(vec![4, 3, 3, 3], ()), 1);
        let bad = Tensor::<f64>::zeros(vec![2, 8, 8], ());
        assert!(matches!(conv2d(&bad, &w, None), Err(Error::Shape(_))));
        let wrong_mask = LayerMask::all_alive("l", Granularity::Kernel, 11);
        let input = Tensor::<f64>::zeros(vec![3, 8, 8], ());
        assert!(conv2d(&input, &w, Some(&wrong_mask)).is_err());
    }
}
