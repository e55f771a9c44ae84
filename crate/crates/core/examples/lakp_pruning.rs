// Usage: cargo run --example lakp_pruning
//
// Look-ahead kernel pruning versus magnitude pruning on a three-layer stack.

use fastcaps::pruning::{kp_prune, lakp_prune, lookahead_scores, LayerStack, PruneLayer};
use fastcaps::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> fastcaps::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut layer = |o, i| Tensor::from_fn(vec![o, i, 3, 3], |_| rng.gen_range(-1.0..1.0));
    let (w0, w1, w2) = (layer(8, 3)?, layer(8, 8)?, layer(4, 8)?);

    let scores = lookahead_scores(Some(&w0), &w1, Some(&w2))?;
    println!(
        "middle layer: {} per-weight scores, first {:.3?}",
        scores.len(),
        &scores.data()[..4]
    );

    let stack = LayerStack::new(vec![
        PruneLayer::kernels("conv_a", w0, 0.25),
        PruneLayer::kernels("conv_b", w1, 0.5),
        PruneLayer::kernels("conv_c", w2, 0.5),
    ])?;
    let lakp = lakp_prune(&stack)?;
    let kp = kp_prune(&stack)?;
    for ((a, b), layer) in lakp.masks.iter().zip(&kp.masks).zip(stack.layers()) {
        let differ = a.units().iter().zip(b.units()).filter(|(x, y)| x != y).count();
        println!(
            "{:<7} kept {:>2}/{:<2} (both methods); selections differ on {differ} kernels",
            a.name(),
            a.survivors(),
            layer.unit_count()
        );
    }
    let zeroed = lakp.weights[1].data().iter().filter(|&&x| x == 0.0).count();
    println!("conv_b after masking: {zeroed} zero weights");
    Ok(())
}
