//! Dynamic routing between PrimaryCaps and DigitCaps.
//!
//! Shapes: `u_hat` is `(IN_CH, OUT_CH, OUT_DIM)`, the logits `b` and couplings
//! `c` are `(IN_CH, OUT_CH)`, `s` and `v` are `(OUT_CH, OUT_DIM)`.
//!
//! Each iteration: `c[i] = softmax_j(b[i])`, `s_j = Σ_i c[i][j]·u_hat[i][j]`,
//! `v_j = squash(s_j)`, then `b[i][j] += u_hat[i][j]·v_j` unless it is the last
//! iteration. The reference path uses exact softmax and the `i→j→k` agreement
//! loop; the optimized path uses the polynomial softmax and the `j→k→i`
//! agreement loop batched `fact` capsules at a time.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fxp::{softmax_approx, softmax_exact, Fx16, HwMath, Scalar};
use crate::tensor::Tensor;

use super::spec::RoutingConfig;

/// Scalars the capsule pipeline can run on.
pub trait CapsScalar: HwMath {
    /// `‖s‖²/(1+‖s‖²) · s/‖s‖`; the zero vector maps to zero.
    fn squash(s: &[Self]) -> Vec<Self>;
}

impl CapsScalar for f64 {
    fn squash(s: &[f64]) -> Vec<f64> {
        let n2: f64 = s.iter().map(|x| x * x).sum();
        if n2 == 0.0 {
            return vec![0.0; s.len()];
        }
        let scale = n2.sqrt() / (1.0 + n2);
        s.iter().map(|x| x * scale).collect()
    }
}

impl CapsScalar for Fx16 {
    /// Integer squash. Components are truncated toward zero, so the output
    /// norm never rounds up to 1.
    fn squash(s: &[Fx16]) -> Vec<Fx16> {
        let Some(first) = s.first() else {
            return Vec::new();
        };
        let fmt = first.format();
        let f = fmt.frac_bits();
        let n2: u64 = s.iter().map(|x| (i64::from(x.raw()).pow(2)) as u64).sum();
        if n2 == 0 {
            return vec![Fx16::zero(fmt); s.len()];
        }
        let norm = i128::from(n2.isqrt());
        let den = (1i128 << (2 * f)) + i128::from(n2);
        s.iter()
            .map(|x| {
                let q = ((i128::from(x.raw()) * norm) << f) / den;
                let raw = q.clamp(i16::MIN.into(), i16::MAX.into()) as i16;
                Fx16::from_raw(raw, fmt)
            })
            .collect()
    }
}

/// Routing working set.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingState<T> {
    pub u_hat: Tensor<T>,
    pub b: Tensor<T>,
    pub c: Tensor<T>,
    pub s: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> RoutingState<T> {
    pub fn in_caps(&self) -> usize {
        self.b.dims()[0]
    }

    pub fn out_caps(&self) -> usize {
        self.b.dims()[1]
    }

    /// `‖v_j‖` for every output capsule.
    pub fn output_norms(&self) -> Vec<f64> {
        let dim = self.v.dims()[1];
        self.v
            .data()
            .chunks(dim)
            .map(|row| row.iter().map(|x| x.to_f64().powi(2)).sum::<f64>().sqrt())
            .collect()
    }

    /// `Σ_j c[i][j]` for every input capsule.
    pub fn coupling_row_sums(&self) -> Vec<f64> {
        self.c
            .data()
            .chunks(self.out_caps())
            .map(|row| row.iter().map(|x| x.to_f64()).sum())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingOptions {
    pub iters: usize,
    pub update_last_iteration: bool,
}

impl RoutingOptions {
    pub fn new(iters: usize) -> Self {
        RoutingOptions {
            iters,
            update_last_iteration: false,
        }
    }
}

impl From<RoutingConfig> for RoutingOptions {
    fn from(c: RoutingConfig) -> Self {
        RoutingOptions {
            iters: c.iters,
            update_last_iteration: c.update_last_iteration,
        }
    }
}

fn u_hat_dims<T: Scalar>(u_hat: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *u_hat.dims() {
        [i, j, k] if i > 0 && j > 0 && k > 0 => Ok((i, j, k)),
        ref d => Err(Error::shape(format!(
            "prediction vectors must be a non-empty (IN, OUT, DIM) tensor, got {d:?}"
        ))),
    }
}

fn check_v<T: Scalar>(u_hat: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, j, k) = u_hat_dims(u_hat)?;
    if v.dims() != [j, k] {
        return Err(Error::shape(format!("outputs must be ({j}, {k}), got {:?}", v.dims())));
    }
    if u_hat.format() != v.format() {
        return Err(Error::shape("prediction vectors and outputs use different formats"));
    }
    Ok((n, j, k))
}

/// Agreement in the original loop order: `i → j → k`.
pub fn agreement_reference<T: Scalar>(u_hat: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, out, dim) = check_v(u_hat, v)?;
    let fmt = v.data()[0].format();
    let u = u_hat.data();
    let vd = v.data();
    let mut delta = Vec::with_capacity(n * out);
    for i in 0..n {
        for j in 0..out {
            let mut acc = T::acc_zero(fmt);
            for k in 0..dim {
                acc = T::mac(acc, u[(i * out + j) * dim + k], vd[j * dim + k]);
            }
            delta.push(T::writeback(acc));
        }
    }
    Tensor::from_vec(vec![n, out], delta)
}

/// Agreement in the reordered loop order `j → k → i`, where the inner loop
/// hands `fact` input capsules to the PE array per step.
///
/// `fact` must divide `IN_CH`. Each `(i, j)` accumulator still sees its `k`
/// terms in ascending order, so the result equals [`agreement_reference`]
/// bit for bit.
pub fn agreement_parallel<T: Scalar>(u_hat: &Tensor<T>, v: &Tensor<T>, fact: usize) -> Result<Tensor<T>> {
    let (n, out, dim) = check_v(u_hat, v)?;
    if fact == 0 || n % fact != 0 {
        return Err(Error::InvalidArgument(format!(
            "fact {fact} does not divide {n} input capsules"
        )));
    }
    let fmt = v.data()[0].format();
    let u = u_hat.data();
    let vd = v.data();
    let columns: Vec<Vec<T>> = (0..out)
        .into_par_iter()
        .map(|j| {
            let mut acc = vec![T::acc_zero(fmt); n];
            for k in 0..dim {
                let vjk = vd[j * dim + k];
                for batch in (0..n).step_by(fact) {
                    for i in batch..batch + fact {
                        acc[i] = T::mac(acc[i], u[(i * out + j) * dim + k], vjk);
                    }
                }
            }
            acc.into_iter().map(T::writeback).collect()
        })
        .collect();
    Tensor::from_fn(vec![n, out], |idx| columns[idx % out][idx / out])
}

type Softmax<T> = fn(&[T]) -> Vec<T>;

fn run<T, A>(u_hat: &Tensor<T>, opts: RoutingOptions, softmax: Softmax<T>, agree: A) -> Result<RoutingState<T>>
where
    T: CapsScalar,
    A: Fn(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
{
    let (n, out, dim) = u_hat_dims(u_hat)?;
    if opts.iters == 0 {
        return Err(Error::InvalidArgument("routing needs at least one iteration".into()));
    }
    let fmt = u_hat.data()[0].format();
    let u = u_hat.data();
    let mut b = Tensor::zeros(vec![n, out], fmt);
    let mut c = b.clone();
    let mut s = Tensor::zeros(vec![out, dim], fmt);
    let mut v = s.clone();

    for iter in 0..opts.iters {
        let coupling: Vec<T> = b.data().chunks(out).flat_map(softmax).collect();
        c = Tensor::from_vec(vec![n, out], coupling)?;
        let cd = c.data();

        let mut sums = Vec::with_capacity(out * dim);
        for j in 0..out {
            for k in 0..dim {
                let mut acc = T::acc_zero(fmt);
                for i in 0..n {
                    acc = T::mac(acc, cd[i * out + j], u[(i * out + j) * dim + k]);
                }
                sums.push(T::writeback(acc));
            }
        }
        s = Tensor::from_vec(vec![out, dim], sums)?;
        let squashed: Vec<T> = s.data().chunks(dim).flat_map(T::squash).collect();
        v = Tensor::from_vec(vec![out, dim], squashed)?;

        if iter + 1 < opts.iters || opts.update_last_iteration {
            let delta = agree(u_hat, &v)?;
            let updated: Vec<T> = b.data().iter().zip(delta.data()).map(|(&x, &d)| x.add(d)).collect();
            b = Tensor::from_vec(vec![n, out], updated)?;
        }
    }

    Ok(RoutingState {
        u_hat: u_hat.clone(),
        b,
        c,
        s,
        v,
    })
}

/// Routing with exact softmax and the original agreement loop.
pub fn route_reference<T: CapsScalar>(u_hat: &Tensor<T>, iters: usize) -> Result<RoutingState<T>> {
    route_reference_with(u_hat, RoutingOptions::new(iters))
}

pub fn route_reference_with<T: CapsScalar>(u_hat: &Tensor<T>, opts: RoutingOptions) -> Result<RoutingState<T>> {
    run(u_hat, opts, softmax_exact::<T>, agreement_reference)
}

/// Routing with the polynomial softmax and the batched agreement loop.
pub fn route_optimized<T: CapsScalar>(u_hat: &Tensor<T>, iters: usize, fact: usize) -> Result<RoutingState<T>> {
    route_optimized_with(u_hat, RoutingOptions::new(iters), fact)
}

pub fn route_optimized_with<T: CapsScalar>(
    u_hat: &Tensor<T>,
    opts: RoutingOptions,
    fact: usize,
) -> Result<RoutingState<T>> {
    let (n, _, _) = u_hat_dims(u_hat)?;
    if fact == 0 || n % fact != 0 {
        return Err(Error::InvalidArgument(format!(
            "fact {fact} does not divide {n} input capsules"
        )));
    }
    run(u_hat, opts, softmax_approx::<T>, |u, v| agreement_parallel(u, v, fact))
}

/// Largest divisor of `in_caps` that is at most `fact`.
pub fn pe_batch(in_caps: usize, fact: usize) -> usize {
    (1..=fact.min(in_caps).max(1))
        .rev()
        .find(|d| in_caps.is_multiple_of(*d))
        .unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxp::{quantize, FxFormat};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_u(rng: &mut ChaCha8Rng, n: usize, j: usize, k: usize, scale: f64) -> Tensor<f64> {
        Tensor::from_fn(vec![n, j, k], |_| rng.gen_range(-scale..scale)).unwrap()
    }

    #[test]
    fn squash_examples() {
        assert_eq!(f64::squash(&[0.0; 4]), vec![0.0; 4]);
        let out = f64::squash(&[1.0, 0.0]);
        assert!((out[0] - 0.5).abs() < 1e-15);
        let s = [3.0, -4.0];
        let out = f64::squash(&s);
        let norm = (out[0] * out[0] + out[1] * out[1]).sqrt();
        assert!((norm - 25.0 / 26.0).abs() < 1e-12);
        let cos = (out[0] * 3.0 - out[1] * 4.0) / (norm * 5.0);
        assert!((cos - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fixed_squash_close_and_bounded() {
        let fmt = FxFormat::Q8_8;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let s: Vec<f64> = (0..8).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let q: Vec<Fx16> = s.iter().map(|&x| quantize(x, fmt)).collect();
            let real: Vec<f64> = f64::squash(&q.iter().map(|x| x.to_f64()).collect::<Vec<_>>());
            let fx = Fx16::squash(&q);
            let n2: f64 = fx.iter().map(|x| x.to_f64().powi(2)).sum();
            assert!(n2 < 1.0);
            for (a, b) in fx.iter().zip(&real) {
                assert!((a.to_f64() - b).abs() <= 2.0 * fmt.resolution(), "{a} vs {b}");
            }
        }
        let big = vec![Fx16::from_raw(i16::MAX, fmt); 8];
        let n2: f64 = Fx16::squash(&big).iter().map(|x| x.to_f64().powi(2)).sum();
        assert!(n2 < 1.0);
        assert_eq!(Fx16::squash(&[Fx16::zero(fmt); 3]), vec![Fx16::zero(fmt); 3]);
    }

    #[test]
    fn agreement_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = random_u(&mut rng, 6, 3, 4, 1.0);
        let zero = Tensor::zeros(vec![3, 4], ());
        assert!(agreement_reference(&u, &zero).unwrap().data().iter().all(|&x| x == 0.0));

        let v = Tensor::from_fn(vec![3, 4], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let same = Tensor::from_fn(vec![6, 3, 4], |idx| v.data()[idx % 12]).unwrap();
        let d = agreement_reference(&same, &v).unwrap();
        for i in 0..6 {
            for j in 0..3 {
                let n2: f64 = v.data()[j * 4..j * 4 + 4].iter().map(|x| x * x).sum();
                assert!((d.get(&[i, j]) - n2).abs() < 1e-12);
            }
        }

        let d = agreement_reference(&u, &v).unwrap();
        for i in 0..6 {
            for j in 0..3 {
                let mut want = 0.0;
                for k in 0..4 {
                    want += u.get(&[i, j, k]) * v.get(&[j, k]);
                }
                assert_eq!(d.get(&[i, j]), want);
            }
        }
    }

    #[test]
    fn parallel_agreement_matches_and_rejects() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fmt = FxFormat::Q8_8;
        let u = random_u(&mut rng, 36, 10, 16, 2.0).quantize(fmt);
        let v = Tensor::from_fn(vec![10, 16], |_| rng.gen_range(-1.0..1.0))
            .unwrap()
            .quantize(fmt);
        let reference = agreement_reference(&u, &v).unwrap();
        for fact in (1..=36).filter(|f| 36 % f == 0) {
            assert_eq!(agreement_parallel(&u, &v, fact).unwrap(), reference);
        }
        assert!(agreement_parallel(&u, &v, 10).is_err());
        assert!(agreement_parallel(&u, &v, 0).is_err());
    }

    #[test]
    fn one_iteration_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = random_u(&mut rng, 8, 5, 4, 1.0);
        let r = route_reference(&u, 1).unwrap();
        assert!(r.c.data().iter().all(|&c| (c - 0.2).abs() < 1e-15));
        let o = route_optimized(&u, 1, 4).unwrap();
        assert!(o.c.data().iter().all(|&c| (c - 0.2).abs() < 1e-3));
        assert!(r.b.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn identical_predictions_keep_uniform_coupling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let row: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u = Tensor::from_fn(vec![6, 3, 4], |idx| row[idx % 4] * (1.0 + (idx / 12) as f64)).unwrap();
        let r = route_reference(&u, 3).unwrap();
        for &c in r.c.data() {
            assert!((c - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn last_update_flag() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u = random_u(&mut rng, 8, 3, 4, 1.0);
        let plain = route_reference(&u, 2).unwrap();
        let opts = RoutingOptions {
            iters: 2,
            update_last_iteration: true,
        };
        let extra = route_reference_with(&u, opts).unwrap();
        assert_eq!(plain.v, extra.v);
        assert_ne!(plain.b, extra.b);
    }

    #[test]
    fn rejects_bad_inputs() {
        let u = Tensor::<f64>::zeros(vec![4, 3, 2], ());
        assert!(route_reference(&u, 0).is_err());
        assert!(route_optimized(&u, 3, 3).is_err());
        assert!(route_reference(&Tensor::<f64>::zeros(vec![4, 3], ()), 1).is_err());
    }

    #[test]
    fn pe_batch_divisors() {
        assert_eq!(pe_batch(1152, 10), 9);
        assert_eq!(pe_batch(252, 10), 9);
        assert_eq!(pe_batch(432, 10), 9);
        assert_eq!(pe_batch(1160, 10), 10);
        assert_eq!(pe_batch(7, 10), 7);
        assert_eq!(pe_batch(13, 10), 1);
        assert_eq!(pe_batch(5, 0), 1);
    }
}
