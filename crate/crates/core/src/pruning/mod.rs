//! Structured kernel pruning.
//!
//! A *kernel* is the `k×k` slice of a conv weight tensor at one
//! `(out_ch, in_ch)` pair, so a `(C_out, C_in, k, k)` tensor has
//! `C_out·C_in` kernels. Layers are pruned independently: every unit (kernel
//! or capsule group) gets a score, and the `floor(s·N)` lowest-scored units
//! are masked, lower unit id first on equal scores.
//!
//! LAKP scores each weight with its look-ahead score
//!
//! ```text
//! L(w[o, c, y, x]) = |w| · ‖W_prev[c, :, :, :]‖_F · ‖W_next[:, o, :, :]‖_F
//! ```
//!
//! (a missing neighbour contributes 1) and sums the weight scores over each
//! unit. KP sums `|w|` instead. Scores always use the unpruned neighbours.

mod mask;
mod propagate;

pub use mask::{Granularity, KernelIndexTable, LayerMask};
pub use propagate::{
    compression_report, propagate_dead_structures, CompressionReport, DeadStructure, LayerShape, NetTopology,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One prunable conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneLayer {
    pub name: String,
    pub weights: Tensor<f64>,
    pub sparsity: f64,
    pub granularity: Granularity,
    /// Output channels per capsule group; ignored at kernel granularity.
    pub group_channels: usize,
}

impl PruneLayer {
    pub fn kernels(name: impl Into<String>, weights: Tensor<f64>, sparsity: f64) -> Self {
        PruneLayer {
            name: name.into(),
            weights,
            sparsity,
            granularity: Granularity::Kernel,
            group_channels: 1,
        }
    }

    pub fn capsule_groups(name: impl Into<String>, weights: Tensor<f64>, sparsity: f64, group_channels: usize) -> Self {
        PruneLayer {
            name: name.into(),
            weights,
            sparsity,
            granularity: Granularity::CapsuleGroup,
            group_channels,
        }
    }

    fn out_channels(&self) -> usize {
        self.weights.dims()[0]
    }

    fn in_channels(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn unit_count(&self) -> usize {
        match self.granularity {
            Granularity::Kernel => self.out_channels() * self.in_channels(),
            Granularity::CapsuleGroup => self.out_channels() / self.group_channels,
        }
    }
}

/// Ordered conv layers `W_1..W_L` with per-layer target sparsities.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    layers: Vec<PruneLayer>,
}

impl LayerStack {
    pub fn new(layers: Vec<PruneLayer>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if l.weights.rank() != 4 {
                return Err(Error::shape(format!(
                    "layer `{}` must be (C_out, C_in, kh, kw), got {:?}",
                    l.name,
                    l.weights.dims()
                )));
            }
            if !(0.0..1.0).contains(&l.sparsity) {
                return Err(Error::InvalidArgument(format!(
                    "layer `{}` sparsity {} outside [0, 1)",
                    l.name, l.sparsity
                )));
            }
            if l.granularity == Granularity::CapsuleGroup
                && (l.group_channels == 0 || l.out_channels() % l.group_channels != 0)
            {
                return Err(Error::shape(format!(
                    "layer `{}`: {} output channels do not split into groups of {}",
                    l.name,
                    l.out_channels(),
                    l.group_channels
                )));
            }
            if let Some(next) = layers.get(i + 1) {
                if next.weights.rank() == 4 && next.in_channels() != l.out_channels() {
                    return Err(Error::shape(format!(
                        "layer `{}` produces {} channels but `{}` consumes {}",
                        l.name,
                        l.out_channels(),
                        next.name,
                        next.in_channels()
                    )));
                }
            }
        }
        Ok(LayerStack { layers })
    }

    pub fn layers(&self) -> &[PruneLayer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Same stack with layer `i`'s weights replaced.
    pub fn with_weights(&self, i: usize, weights: Tensor<f64>) -> Result<Self> {
        let mut layers = self.layers.clone();
        layers[i].weights = weights;
        Self::new(layers)
    }

    /// Same stack with layer `i`'s sparsity replaced.
    pub fn with_sparsity(&self, i: usize, sparsity: f64) -> Result<Self> {
        let mut layers = self.layers.clone();
        layers[i].sparsity = sparsity;
        Self::new(layers)
    }
}

/// Frobenius norm of each output-channel slice `W[o, :, :, :]`.
fn out_channel_norms(w: &Tensor<f64>) -> Vec<f64> {
    let per = w.len() / w.dims()[0];
    w.data()
        .chunks(per)
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

/// Frobenius norm of each input-channel slice `W[:, c, :, :]`.
fn in_channel_norms(w: &Tensor<f64>) -> Vec<f64> {
    let d = w.dims();
    let (c_in, area) = (d[1], d[2] * d[3]);
    let mut sq = vec![0.0; c_in];
    for (i, chunk) in w.data().chunks(area).enumerate() {
        sq[i % c_in] += chunk.iter().map(|x| x * x).sum::<f64>();
    }
    sq.into_iter().map(f64::sqrt).collect()
}

/// Per-weight look-ahead scores for `w`, given its unpruned neighbours.
pub fn lookahead_scores(
    prev: Option<&Tensor<f64>>,
    w: &Tensor<f64>,
    next: Option<&Tensor<f64>>,
) -> Result<Tensor<f64>> {
    let d = w.dims();
    if d.len() != 4 {
        return Err(Error::shape(format!("weights must be 4-D, got {d:?}")));
    }
    let (c_out, c_in, area) = (d[0], d[1], d[2] * d[3]);
    let f_in = match prev {
        Some(p) => {
            if p.rank() != 4 || p.dims()[0] != c_in {
                return Err(Error::shape(format!(
                    "previous layer {:?} does not produce the {c_in} input channels",
                    p.dims()
                )));
            }
            out_channel_norms(p)
        }
        None => vec![1.0; c_in],
    };
    let f_out = match next {
        Some(n) => {
            if n.rank() != 4 || n.dims()[1] != c_out {
                return Err(Error::shape(format!(
                    "next layer {:?} does not consume the {c_out} output channels",
                    n.dims()
                )));
            }
            in_channel_norms(n)
        }
        None => vec![1.0; c_out],
    };
    let data = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let kernel = i / area;
            v.abs() * f_in[kernel % c_in] * f_out[kernel / c_in]
        })
        .collect();
    Tensor::from_vec(d.to_vec(), data)
}

/// Sums per-weight scores into per-unit scores.
fn unit_scores(layer: &PruneLayer, weight_scores: &Tensor<f64>) -> Vec<f64> {
    let d = weight_scores.dims();
    let area = d[2] * d[3];
    let kernel: Vec<f64> = weight_scores.data().chunks(area).map(|c| c.iter().sum()).collect();
    match layer.granularity {
        Granularity::Kernel => kernel,
        Granularity::CapsuleGroup => kernel
            .chunks(layer.group_channels * d[1])
            .map(|c| c.iter().sum())
            .collect(),
    }
}

/// Number of units pruned at sparsity `s` out of `n`.
pub fn pruned_count(sparsity: f64, n: usize) -> usize {
    // guard against 0.29 * 100 = 28.999…
    ((sparsity * n as f64) + 1e-9).floor() as usize
}

/// Survival bits masking the `floor(s·N)` lowest scores; ties go to the
/// lower unit id.
pub fn select_survivors(scores: &[f64], sparsity: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut alive = vec![true; scores.len()];
    for &u in order.iter().take(pruned_count(sparsity, scores.len())) {
        alive[u] = false;
    }
    alive
}

/// Result of a pruning pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub masks: Vec<LayerMask>,
    /// `mask ⊙ W` per layer.
    pub weights: Vec<Tensor<f64>>,
    /// Per-unit scores that drove the selection.
    pub unit_scores: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pruner {
    LookAhead,
    Magnitude,
}

impl std::str::FromStr for Pruner {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lakp" => Ok(Pruner::LookAhead),
            "kp" => Ok(Pruner::Magnitude),
            other => Err(format!("unknown pruner `{other}` (expected lakp or kp)")),
        }
    }
}

impl std::fmt::Display for Pruner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pruner::LookAhead => "lakp",
            Pruner::Magnitude => "kp",
        })
    }
}

pub fn prune(stack: &LayerStack, pruner: Pruner) -> Result<PruneOutcome> {
    match pruner {
        Pruner::LookAhead => lakp_prune(stack),
        Pruner::Magnitude => kp_prune(stack),
    }
}

/// Look-ahead kernel pruning.
pub fn lakp_prune(stack: &LayerStack) -> Result<PruneOutcome> {
    let layers = stack.layers();
    prune_by(stack, |i| {
        let prev = i.checked_sub(1).map(|p| &layers[p].weights);
        let next = layers.get(i + 1).map(|n| &n.weights);
        lookahead_scores(prev, &layers[i].weights, next)
    })
}

/// Magnitude kernel pruning: the unit score is `Σ|w|`.
pub fn kp_prune(stack: &LayerStack) -> Result<PruneOutcome> {
    prune_by(stack, |i| Ok(stack.layers()[i].weights.map(f64::abs)))
}

fn prune_by(stack: &LayerStack, weight_scores: impl Fn(usize) -> Result<Tensor<f64>>) -> Result<PruneOutcome> {
    let mut out = PruneOutcome {
        masks: Vec::with_capacity(stack.len()),
        weights: Vec::with_capacity(stack.len()),
        unit_scores: Vec::with_capacity(stack.len()),
    };
    for (i, layer) in stack.layers().iter().enumerate() {
        let scores = unit_scores(layer, &weight_scores(i)?);
        let mask = LayerMask::from_units(
            layer.name.clone(),
            layer.granularity,
            select_survivors(&scores, layer.sparsity),
        );
        out.weights.push(apply_mask(&layer.weights, &mask)?);
        out.masks.push(mask);
        out.unit_scores.push(scores);
    }
    Ok(out)
}

/// Zeroes the kernels a mask removes.
pub fn apply_mask(weights: &Tensor<f64>, mask: &LayerMask) -> Result<Tensor<f64>> {
    let d = weights.dims();
    let table = mask.kernel_table(d[0], d[1])?;
    let area = d[2] * d[3];
    let data = weights
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if table[i / area] { v } else { 0.0 })
        .collect();
    Tensor::from_vec(d.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ones(dims: Vec<usize>) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| 1.0).unwrap()
    }

    fn random(dims: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    /// Direct evaluation of the look-ahead formula, weight by weight.
    fn oracle_score(prev: Option<&Tensor<f64>>, w: &Tensor<f64>, next: Option<&Tensor<f64>>, idx: [usize; 4]) -> f64 {
        let [o, c, y, x] = idx;
        let f_in = prev.map_or(1.0, |p| {
            let d = p.dims();
            let mut s = 0.0;
            for a in 0..d[1] {
                for b in 0..d[2] {
                    for e in 0..d[3] {
                        s += p.get(&[c, a, b, e]).powi(2);
                    }
                }
            }
            s.sqrt()
        });
        let f_out = next.map_or(1.0, |n| {
            let d = n.dims();
            let mut s = 0.0;
            for a in 0..d[0] {
                for b in 0..d[2] {
                    for e in 0..d[3] {
                        s += n.get(&[a, o, b, e]).powi(2);
                    }
                }
            }
            s.sqrt()
        });
        w.get(&[o, c, y, x]).abs() * f_in * f_out
    }

    #[test]
    fn first_layer_unit_next() {
        let w = Tensor::from_vec(vec![2, 1, 1, 2], vec![0.5, -2.0, 3.0, 1.0]).unwrap();
        let next = ones(vec![3, 2, 2, 2]);
        let s = lookahead_scores(None, &w, Some(&next)).unwrap();
        // each output channel o is consumed by 3·2·2 = 12 unit weights
        let f = 12f64.sqrt();
        assert_eq!(s.data(), &[0.5 * f, 2.0 * f, 3.0 * f, 1.0 * f]);
    }

    #[test]
    fn all_ones_demo_stack() {
        let t = ones(vec![2, 2, 3, 3]);
        let s = lookahead_scores(Some(&t), &t, Some(&t)).unwrap();
        for (i, v) in s.data().iter().enumerate() {
            let o = i / 18;
            let c = (i / 9) % 2;
            let oracle = oracle_score(Some(&t), &t, Some(&t), [o, c, (i / 3) % 3, i % 3]);
            assert!((v - oracle).abs() < 1e-12);
            assert!((v - 18.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_stack_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(vec![4, 3, 3, 3], &mut rng);
        let b = random(vec![5, 4, 3, 3], &mut rng);
        let c = random(vec![2, 5, 3, 3], &mut rng);
        let s = lookahead_scores(Some(&a), &b, Some(&c)).unwrap();
        for o in 0..5 {
            for ci in 0..4 {
                for y in 0..3 {
                    for x in 0..3 {
                        let want = oracle_score(Some(&a), &b, Some(&c), [o, ci, y, x]);
                        assert!((s.get(&[o, ci, y, x]) - want).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let a = ones(vec![4, 3, 3, 3]);
        let b = ones(vec![5, 2, 3, 3]);
        assert!(lookahead_scores(Some(&a), &b, None).is_err());
        assert!(LayerStack::new(vec![PruneLayer::kernels("a", a, 0.0), PruneLayer::kernels("b", b, 0.0)]).is_err());
    }

    #[test]
    fn zero_sparsity_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stack = LayerStack::new(vec![
            PruneLayer::kernels("a", random(vec![4, 3, 3, 3], &mut rng), 0.0),
            PruneLayer::kernels("b", random(vec![5, 4, 3, 3], &mut rng), 0.0),
        ])
        .unwrap();
        let out = lakp_prune(&stack).unwrap();
        for (m, (w, l)) in out.masks.iter().zip(out.weights.iter().zip(stack.layers())) {
            assert_eq!(m.survivors(), m.unit_count());
            assert_eq!(w, &l.weights);
        }
    }

    #[test]
    fn middle_layer_half_matches_oracle_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(vec![4, 3, 3, 3], &mut rng);
        let b = random(vec![6, 4, 3, 3], &mut rng);
        let c = random(vec![2, 6, 3, 3], &mut rng);
        let stack = LayerStack::new(vec![
            PruneLayer::kernels("a", a.clone(), 0.0),
            PruneLayer::kernels("b", b.clone(), 0.5),
            PruneLayer::kernels("c", c.clone(), 0.0),
        ])
        .unwrap();
        let out = lakp_prune(&stack).unwrap();

        let mut kernel_scores: Vec<(f64, usize)> = (0..24)
            .map(|k| {
                let (o, ci) = (k / 4, k % 4);
                let mut s = 0.0;
                for y in 0..3 {
                    for x in 0..3 {
                        s += oracle_score(Some(&a), &b, Some(&c), [o, ci, y, x]);
                    }
                }
                (s, k)
            })
            .collect();
        kernel_scores.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let mut expect = [true; 24];
        for &(_, k) in &kernel_scores[..12] {
            expect[k] = false;
        }
        assert_eq!(out.masks[1].units(), &expect[..]);
        assert_eq!(out.masks[0].survivors(), 12);
    }

    #[test]
    fn single_layer_kp_equals_lakp() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for s in [0.1, 0.3, 0.5, 0.9] {
            let stack =
                LayerStack::new(vec![PruneLayer::kernels("only", random(vec![8, 5, 3, 3], &mut rng), s)]).unwrap();
            assert_eq!(lakp_prune(&stack).unwrap().masks, kp_prune(&stack).unwrap().masks);
        }
    }

    #[test]
    fn zero_kernel_pruned_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut w = random(vec![4, 2, 3, 3], &mut rng).into_data();
        for v in &mut w[5 * 9..6 * 9] {
            *v = 0.0;
        }
        let w = Tensor::from_vec(vec![4, 2, 3, 3], w).unwrap();
        let stack = LayerStack::new(vec![PruneLayer::kernels("l", w, 0.125)]).unwrap();
        let out = kp_prune(&stack).unwrap();
        assert_eq!(out.masks[0].surviving_indices(), vec![0, 1, 2, 3, 4, 6, 7]);
    }

    #[test]
    fn ties_prune_lower_id() {
        assert_eq!(
            select_survivors(&[1.0, 1.0, 1.0, 0.5], 0.5),
            vec![false, true, true, false]
        );
        assert_eq!(pruned_count(0.29, 100), 29);
    }

    #[test]
    fn capsule_groups_leave_seven_types() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random(vec![32 * 2, 3, 1, 1], &mut rng);
        let stack = LayerStack::new(vec![PruneLayer::capsule_groups("primary", w, 25.0 / 32.0, 2)]).unwrap();
        let out = lakp_prune(&stack).unwrap();
        assert_eq!(out.masks[0].unit_count(), 32);
        assert_eq!(out.masks[0].survivors(), 7);
        assert_eq!(out.masks[0].survivors() * 36, 252);
    }
}
