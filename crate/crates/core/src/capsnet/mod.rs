//! CapsNet inference: conv1 → ReLU → PrimaryCaps conv → capsules →
//! prediction vectors → dynamic routing → class by longest output capsule.

mod routing;
mod spec;

pub use routing::{
    agreement_parallel, agreement_reference, pe_batch, route_optimized, route_optimized_with, route_reference,
    route_reference_with, CapsScalar, RoutingOptions, RoutingState,
};
pub use spec::{CapsNetSpec, ConvSpec, DigitCapsSpec, PrimaryCapsSpec, RoutingConfig};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fxp::{Fx16, FxFormat, Scalar};
use crate::pruning::{DeadStructure, Granularity, LayerMask};
use crate::tensor::{conv2d, ConvLayerWeights, Tensor};

/// Half-width of the uniform range used by [`CapsNetModel::random`].
pub const RANDOM_WEIGHT_RANGE: f64 = 0.1;

/// Groups `(C, gh, gw)` features into `(C/caps_dim · gh·gw, caps_dim)`
/// capsules. Capsule `t·gh·gw + p` takes channels `t·caps_dim ..` at grid
/// position `p`.
pub fn primary_caps<T: CapsScalar>(features: &Tensor<T>, caps_dim: usize, squash: bool) -> Result<Tensor<T>> {
    let [c, gh, gw] = *features.dims() else {
        return Err(Error::shape(format!(
            "PrimaryCaps features must be (C, H, W), got {:?}",
            features.dims()
        )));
    };
    if caps_dim == 0 || c % caps_dim != 0 {
        return Err(Error::shape(format!(
            "{c} channels do not split into {caps_dim}-dimensional capsules"
        )));
    }
    let grid = gh * gw;
    let types = c / caps_dim;
    let f = features.data();
    let mut out = Vec::with_capacity(c * grid);
    for t in 0..types {
        for p in 0..grid {
            let cap: Vec<T> = (0..caps_dim).map(|d| f[(t * caps_dim + d) * grid + p]).collect();
            if squash {
                out.extend(T::squash(&cap));
            } else {
                out.extend(cap);
            }
        }
    }
    Tensor::from_vec(vec![types * grid, caps_dim], out)
}

/// `u_hat[i][j][k] = Σ_d W[i][j][k][d] · capsules[i][d]`.
pub fn predict_vectors<T: Scalar>(capsules: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, d] = *capsules.dims() else {
        return Err(Error::shape(format!(
            "capsules must be (IN, DIM), got {:?}",
            capsules.dims()
        )));
    };
    let [wn, out, dim, wd] = *w.dims() else {
        return Err(Error::shape(format!(
            "routing weights must be (IN, OUT, OUT_DIM, DIM), got {:?}",
            w.dims()
        )));
    };
    if wn != n || wd != d {
        return Err(Error::shape(format!(
            "routing weights {:?} do not fit capsules {:?}",
            w.dims(),
            capsules.dims()
        )));
    }
    if n > 0 && capsules.format() != w.format() {
        return Err(Error::shape("capsules and routing weights use different formats"));
    }
    let Some(fmt) = capsules.format() else {
        return Tensor::from_vec(vec![0, out, dim], Vec::new());
    };
    let caps = capsules.data();
    let wd_ = w.data();
    let block = out * dim;
    let rows: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let u = &caps[i * d..(i + 1) * d];
            (0..block)
                .map(|jk| {
                    let row = &wd_[(i * block + jk) * d..(i * block + jk + 1) * d];
                    let acc = row
                        .iter()
                        .zip(u)
                        .fold(T::acc_zero(fmt), |a, (&wv, &uv)| T::mac(a, wv, uv));
                    T::writeback(acc)
                })
                .collect()
        })
        .collect();
    Tensor::from_vec(vec![n, out, dim], rows.concat())
}

/// Which routing implementation [`infer`] runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingMode {
    Reference,
    /// Polynomial softmax and batched agreement. `fact` is reduced to the
    /// largest divisor of the capsule count that does not exceed it.
    Optimized {
        fact: usize,
    },
}

impl RoutingMode {
    pub fn name(self) -> &'static str {
        match self {
            RoutingMode::Reference => "reference",
            RoutingMode::Optimized { .. } => "optimized",
        }
    }
}

impl fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RoutingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "reference" => Ok(RoutingMode::Reference),
            "optimized" => Ok(RoutingMode::Optimized { fact: 10 }),
            other => Err(format!("unknown routing mode `{other}`")),
        }
    }
}

/// Weights of a CapsNet, optionally with kernel masks for the two conv layers.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsNetModel<T> {
    spec: CapsNetSpec,
    conv1: ConvLayerWeights<T>,
    primary: ConvLayerWeights<T>,
    digit: Tensor<T>,
    masks: Option<Vec<LayerMask>>,
}

impl<T: Scalar> CapsNetModel<T> {
    pub fn new(
        spec: CapsNetSpec,
        conv1: ConvLayerWeights<T>,
        primary: ConvLayerWeights<T>,
        digit: Tensor<T>,
    ) -> Result<Self> {
        spec.validate()?;
        let expect = |what: &str, got: &[usize], want: &[usize]| {
            if got == want {
                Ok(())
            } else {
                Err(Error::shape(format!("{what} has shape {got:?}, expected {want:?}")))
            }
        };
        let (k1, kp) = (spec.conv1.kernel, spec.primary.kernel);
        expect(
            "conv1 kernels",
            conv1.kernels().dims(),
            &[spec.conv1.out_channels, spec.input_channels, k1, k1],
        )?;
        expect(
            "primary kernels",
            primary.kernels().dims(),
            &[spec.primary_channels(), spec.conv1.out_channels, kp, kp],
        )?;
        expect(
            "routing weights",
            digit.dims(),
            &[spec.in_caps(), spec.digit.count, spec.digit.dim, spec.primary.caps_dim],
        )?;
        if conv1.stride() != spec.conv1.stride || primary.stride() != spec.primary.stride {
            return Err(Error::shape("conv strides disagree with the architecture"));
        }
        if conv1.kernels().format() != primary.kernels().format() || conv1.kernels().format() != digit.format() {
            return Err(Error::shape("model tensors use different formats"));
        }
        Ok(CapsNetModel {
            spec,
            conv1,
            primary,
            digit,
            masks: None,
        })
    }

    /// Attaches conv1 and PrimaryCaps masks (any granularity).
    pub fn with_masks(mut self, masks: Vec<LayerMask>) -> Result<Self> {
        if masks.len() != 2 {
            return Err(Error::shape(format!("expected 2 layer masks, got {}", masks.len())));
        }
        masks[0].kernel_table(self.conv1.out_channels(), self.conv1.in_channels())?;
        masks[1].kernel_table(self.primary.out_channels(), self.primary.in_channels())?;
        self.masks = Some(masks);
        Ok(self)
    }

    pub fn spec(&self) -> &CapsNetSpec {
        &self.spec
    }

    pub fn conv1(&self) -> &ConvLayerWeights<T> {
        &self.conv1
    }

    pub fn primary(&self) -> &ConvLayerWeights<T> {
        &self.primary
    }

    /// Routing weights, `(IN_CH, OUT_CH, OUT_DIM, caps_dim)`.
    pub fn digit(&self) -> &Tensor<T> {
        &self.digit
    }

    pub fn masks(&self) -> Option<&[LayerMask]> {
        self.masks.as_deref()
    }

    pub fn routing_weight_count(&self) -> usize {
        self.digit.len()
    }

    pub fn set_routing(&mut self, routing: RoutingConfig) {
        self.spec.routing = routing;
    }

    pub fn map<U: Scalar>(&self, mut f: impl FnMut(T) -> U) -> CapsNetModel<U> {
        CapsNetModel {
            spec: self.spec,
            conv1: self.conv1.map(&mut f),
            primary: self.primary.map(&mut f),
            digit: self.digit.map(&mut f),
            masks: self.masks.clone(),
        }
    }

    /// Zeroes every weight removed by `dead`: masked kernels, biases of dead
    /// channels and the routing weights of dead capsules. The kernel masks
    /// of `dead` are attached.
    pub fn apply_structure(&self, dead: &DeadStructure) -> Result<Self> {
        let conv1 = zero_dead(&self.conv1, &dead.kernel_masks[0], &dead.live_channels[0])?;
        let primary = zero_dead(&self.primary, &dead.kernel_masks[1], &dead.live_channels[1])?;
        let alive = dead.routing_capsule_mask(self.spec.primary.capsule_types);
        if alive.len() != self.spec.in_caps() {
            return Err(Error::shape("dead structure does not match the model"));
        }
        let block = self.spec.params_per_capsule();
        let zero = T::zero(self.digit.data()[0].format());
        let digit = Tensor::from_fn(self.digit.dims().to_vec(), |idx| {
            if alive[idx / block] {
                self.digit.data()[idx]
            } else {
                zero
            }
        })?;
        CapsNetModel::new(self.spec, conv1, primary, digit)?.with_masks(dead.kernel_masks.clone())
    }

    /// Physically removes dead conv1 channels and dead capsule types.
    ///
    /// Apply to a model that went through [`Self::apply_structure`]; the
    /// compacted network then computes the same outputs.
    pub fn compact(&self, dead: &DeadStructure) -> Result<Self> {
        let spec = dead.reduced_spec(&self.spec);
        let live1: Vec<usize> = dead.live_channels[0].iter().map(|&c| c as usize).collect();
        let types: Vec<usize> = dead.live_capsule_types.iter().map(|&t| t as usize).collect();
        let caps_dim = self.spec.primary.caps_dim;
        let live_primary: Vec<usize> = types.iter().flat_map(|&t| t * caps_dim..(t + 1) * caps_dim).collect();
        let all_inputs: Vec<usize> = (0..self.spec.input_channels).collect();

        let conv1 = select_conv(&self.conv1, &live1, &all_inputs)?;
        let primary = select_conv(&self.primary, &live_primary, &live1)?;

        let grid = self.spec.grid_size();
        let block = self.spec.params_per_capsule();
        let mut digit = Vec::with_capacity(types.len() * grid * block);
        for &t in &types {
            let start = t * grid * block;
            digit.extend_from_slice(&self.digit.data()[start..start + grid * block]);
        }
        let digit = Tensor::from_vec(
            vec![types.len() * grid, spec.digit.count, spec.digit.dim, caps_dim],
            digit,
        )?;

        let remap = |mask: &LayerMask, outs: &[usize], ins: &[usize], in_total: usize| {
            let units = outs
                .iter()
                .flat_map(|&o| ins.iter().map(move |&c| mask.is_alive(o * in_total + c)))
                .collect();
            LayerMask::from_units(mask.name(), Granularity::Kernel, units)
        };
        let masks = vec![
            remap(&dead.kernel_masks[0], &live1, &all_inputs, self.spec.input_channels),
            remap(
                &dead.kernel_masks[1],
                &live_primary,
                &live1,
                self.spec.conv1.out_channels,
            ),
        ];
        CapsNetModel::new(spec, conv1, primary, digit)?.with_masks(masks)
    }
}

fn zero_dead<T: Scalar>(w: &ConvLayerWeights<T>, mask: &LayerMask, live: &[u32]) -> Result<ConvLayerWeights<T>> {
    let (out, inp, k) = (w.out_channels(), w.in_channels(), w.kernel_size());
    let table = mask.kernel_table(out, inp)?;
    let zero = T::zero(w.kernels().data()[0].format());
    let area = k * k;
    let kernels = Tensor::from_fn(w.kernels().dims().to_vec(), |idx| {
        if table[idx / area] {
            w.kernels().data()[idx]
        } else {
            zero
        }
    })?;
    let bias = Tensor::from_fn(vec![out], |o| {
        if live.binary_search(&(o as u32)).is_ok() {
            w.bias().data()[o]
        } else {
            zero
        }
    })?;
    ConvLayerWeights::new(kernels, bias, w.stride())
}

fn select_conv<T: Scalar>(w: &ConvLayerWeights<T>, outs: &[usize], ins: &[usize]) -> Result<ConvLayerWeights<T>> {
    let (inp, k) = (w.in_channels(), w.kernel_size());
    let area = k * k;
    let src = w.kernels().data();
    let mut data = Vec::with_capacity(outs.len() * ins.len() * area);
    for &o in outs {
        for &c in ins {
            let start = (o * inp + c) * area;
            data.extend_from_slice(&src[start..start + area]);
        }
    }
    let kernels = Tensor::from_vec(vec![outs.len(), ins.len(), k, k], data)?;
    let bias = Tensor::from_vec(vec![outs.len()], outs.iter().map(|&o| w.bias().data()[o]).collect())?;
    ConvLayerWeights::new(kernels, bias, w.stride())
}

impl CapsNetModel<f64> {
    /// Weights drawn uniformly from `[-0.1, 0.1]` by a seeded ChaCha8 stream,
    /// in the order conv1 kernels, conv1 bias, primary kernels, primary bias,
    /// routing weights.
    pub fn random(spec: CapsNetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw =
            |dims: Vec<usize>| Tensor::from_fn(dims, |_| rng.gen_range(-RANDOM_WEIGHT_RANGE..=RANDOM_WEIGHT_RANGE));
        let (k1, kp) = (spec.conv1.kernel, spec.primary.kernel);
        let c1 = spec.conv1.out_channels;
        let conv1 = ConvLayerWeights::new(
            draw(vec![c1, spec.input_channels, k1, k1])?,
            draw(vec![c1])?,
            spec.conv1.stride,
        )?;
        let pc = spec.primary_channels();
        let primary = ConvLayerWeights::new(draw(vec![pc, c1, kp, kp])?, draw(vec![pc])?, spec.primary.stride)?;
        let digit = draw(vec![
            spec.in_caps(),
            spec.digit.count,
            spec.digit.dim,
            spec.primary.caps_dim,
        ])?;
        CapsNetModel::new(spec, conv1, primary, digit)
    }

    /// Same weights with both bias vectors set to zero.
    pub fn without_bias(&self) -> Self {
        let zero_bias = |w: &ConvLayerWeights<f64>| {
            ConvLayerWeights::new(
                w.kernels().clone(),
                Tensor::zeros(vec![w.out_channels()], ()),
                w.stride(),
            )
            .expect("shape unchanged")
        };
        CapsNetModel {
            conv1: zero_bias(&self.conv1),
            primary: zero_bias(&self.primary),
            ..self.clone()
        }
    }

    pub fn quantize(&self, fmt: FxFormat) -> CapsNetModel<Fx16> {
        self.map(|x| crate::fxp::quantize(x, fmt))
    }
}

/// Class decision and output capsule lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub class: usize,
    pub caps_norms: Vec<f64>,
}

impl Inference {
    fn from_norms(caps_norms: Vec<f64>) -> Self {
        Inference {
            class: argmax(&caps_norms),
            caps_norms,
        }
    }

    /// Gap between the longest and second longest output capsule.
    pub fn margin(&self) -> f64 {
        let mut sorted = self.caps_norms.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        match sorted.as_slice() {
            [a, b, ..] => a - b,
            _ => f64::INFINITY,
        }
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct InferenceTrace<T> {
    pub conv1: Tensor<T>,
    pub primary: Tensor<T>,
    pub capsules: Tensor<T>,
    pub routing: RoutingState<T>,
    pub result: Inference,
}

pub fn infer<T: CapsScalar>(image: &Tensor<T>, model: &CapsNetModel<T>, mode: RoutingMode) -> Result<Inference> {
    infer_trace(image, model, mode).map(|t| t.result)
}

pub fn infer_trace<T: CapsScalar>(
    image: &Tensor<T>,
    model: &CapsNetModel<T>,
    mode: RoutingMode,
) -> Result<InferenceTrace<T>> {
    let spec = model.spec();
    let want = [spec.input_channels, spec.input_h, spec.input_w];
    if image.dims() != want {
        return Err(Error::shape(format!(
            "image has shape {:?}, expected {want:?}",
            image.dims()
        )));
    }
    let masks = model.masks();
    let conv1 = conv2d(image, model.conv1(), masks.map(|m| &m[0]))?.map(T::relu);
    let primary = conv2d(&conv1, model.primary(), masks.map(|m| &m[1]))?;
    let capsules = primary_caps(&primary, spec.primary.caps_dim, spec.routing.squash_primary)?;
    let u_hat = predict_vectors(&capsules, model.digit())?;
    let opts = RoutingOptions::from(spec.routing);
    let routing = match mode {
        RoutingMode::Reference => route_reference_with(&u_hat, opts)?,
        RoutingMode::Optimized { fact } => route_optimized_with(&u_hat, opts, pe_batch(spec.in_caps(), fact))?,
    };
    let result = Inference::from_norms(routing.output_norms());
    Ok(InferenceTrace {
        conv1,
        primary,
        capsules,
        routing,
        result,
    })
}

/// A small architecture with the same structure as [`CapsNetSpec::mnist`],
/// cheap enough for randomized trials: 12×12 input, 8 conv1 channels, 4
/// capsule types of dimension 4 on a 3×3 grid (36 capsules), 5 output capsules of
/// dimension 6.
pub fn tiny_spec() -> CapsNetSpec {
    CapsNetSpec {
        input_channels: 1,
        input_h: 12,
        input_w: 12,
        conv1: ConvSpec {
            out_channels: 8,
            kernel: 5,
            stride: 1,
        },
        primary: PrimaryCapsSpec {
            capsule_types: 4,
            caps_dim: 4,
            kernel: 4,
            stride: 2,
        },
        digit: DigitCapsSpec { count: 5, dim: 6 },
        routing: RoutingConfig::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::{propagate_dead_structures, NetTopology};

    fn random_image(spec: &CapsNetSpec, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![spec.input_channels, spec.input_h, spec.input_w], |_| {
            rng.gen_range(0.0..1.0)
        })
        .unwrap()
    }

    #[test]
    fn primary_caps_locality() {
        let spec = CapsNetSpec::mnist();
        let zero = Tensor::<f64>::zeros(vec![256, 6, 6], ());
        let caps = primary_caps(&zero, 8, true).unwrap();
        assert_eq!(caps.dims(), &[1152, 8]);
        assert!(caps.data().iter().all(|&x| x == 0.0));

        let (t, p) = (5, 17);
        let feats = Tensor::from_fn(vec![256, 6, 6], |idx| {
            let (c, pos) = (idx / 36, idx % 36);
            if c / 8 == t && pos == p {
                1.0 + c as f64
            } else {
                0.0
            }
        })
        .unwrap();
        let caps = primary_caps(&feats, spec.primary.caps_dim, true).unwrap();
        for i in 0..1152 {
            let nonzero = caps.data()[i * 8..i * 8 + 8].iter().any(|&x| x != 0.0);
            assert_eq!(nonzero, i == t * 36 + p);
        }
        assert!(primary_caps(&Tensor::<f64>::zeros(vec![10, 2, 2], ()), 8, true).is_err());
    }

    #[test]
    fn predict_identity_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let caps = Tensor::from_fn(vec![5, 8], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let w = Tensor::from_fn(vec![5, 3, 8, 8], |idx| {
            let (k, d) = ((idx / 8) % 8, idx % 8);
            if k == d {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let u = predict_vectors(&caps, &w).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                for k in 0..8 {
                    assert_eq!(u.get(&[i, j, k]), caps.get(&[i, k]));
                }
            }
        }
        let bad = Tensor::<f64>::zeros(vec![4, 3, 8, 8], ());
        assert!(predict_vectors(&caps, &bad).is_err());
    }

    #[test]
    fn zero_image_ties_to_class_zero() {
        let spec = tiny_spec();
        let model = CapsNetModel::random(spec, 0).unwrap().without_bias();
        let image = Tensor::zeros(vec![1, 12, 12], ());
        for mode in [RoutingMode::Reference, RoutingMode::Optimized { fact: 4 }] {
            let r = infer(&image, &model, mode).unwrap();
            assert_eq!(r.class, 0);
            assert!(r.caps_norms.iter().all(|&n| n == r.caps_norms[0]));
        }
    }

    #[test]
    fn mnist_model_shapes() {
        let spec = CapsNetSpec::mnist();
        let model = CapsNetModel::random(spec, 1).unwrap();
        assert_eq!(model.routing_weight_count(), 1_474_560);
        let r = infer(&random_image(&spec, 2), &model, RoutingMode::Reference).unwrap();
        assert_eq!(r.caps_norms.len(), 10);
        assert!(r.caps_norms.iter().all(|&n| (0.0..1.0).contains(&n)));
    }

    #[test]
    fn fixed_point_pipeline_runs() {
        let spec = tiny_spec();
        let model = CapsNetModel::random(spec, 3).unwrap();
        let fmt = FxFormat::Q8_8;
        let image = random_image(&spec, 4);
        let r = infer(
            &image.quantize(fmt),
            &model.quantize(fmt),
            RoutingMode::Optimized { fact: 10 },
        )
        .unwrap();
        assert_eq!(r.caps_norms.len(), 5);
        assert!(r.caps_norms.iter().all(|&n| n < 1.0));
    }

    #[test]
    fn compacted_model_matches_masked_model() {
        let spec = tiny_spec();
        let model = CapsNetModel::random(spec, 5).unwrap();
        let mut conv1 = LayerMask::all_alive("conv1", Granularity::Kernel, 8);
        conv1.kill(2);
        let mut primary = LayerMask::all_alive("primary", Granularity::CapsuleGroup, 4);
        primary.kill(1);
        let dead = propagate_dead_structures(&[conv1, primary], &NetTopology::from_spec(&spec)).unwrap();
        let masked = model.apply_structure(&dead).unwrap();
        let small = masked.compact(&dead).unwrap();
        assert_eq!(small.spec().conv1.out_channels, 7);
        assert_eq!(small.spec().in_caps(), 27);
        let image = random_image(&spec, 6);
        let a = infer(&image, &masked, RoutingMode::Reference).unwrap();
        let b = infer(&image, &small, RoutingMode::Reference).unwrap();
        assert_eq!(a.class, b.class);
        for (x, y) in a.caps_norms.iter().zip(&b.caps_norms) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_tie_break() {
        assert_eq!(argmax(&[0.5, 0.5, 0.2]), 0);
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
    }
}
