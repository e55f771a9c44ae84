// Usage: cargo run --example routing
//
// Dynamic routing between capsules: the reference loop nest, the
// PE-batched agreement and fixed-point routing.

use fastcaps::capsnet::{
    agreement_parallel, agreement_reference, argmax, pe_batch, route_optimized, route_reference, route_reference_with,
    RoutingOptions,
};
use fastcaps::fxp::FxFormat;
use fastcaps::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> fastcaps::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, j, k) = (36, 10, 16);
    let u = Tensor::from_fn(vec![n, j, k], |_| rng.gen_range(-0.5..0.5))?;

    for iters in 1..=3 {
        let st = route_reference(&u, iters)?;
        let norms = st.output_norms();
        println!("iters={iters} class={} norms={:.4?}", argmax(&norms), norms);
    }

    let reference = route_reference(&u, 3)?;
    let optimized = route_optimized(&u, 3, pe_batch(n, 10))?;
    let diff = reference
        .v
        .data()
        .iter()
        .zip(optimized.v.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!(
        "optimized (batch {}) vs reference: max |dv| = {diff:.2e}",
        pe_batch(n, 10)
    );

    let last = route_reference_with(
        &u,
        RoutingOptions {
            iters: 3,
            update_last_iteration: true,
        },
    )?;
    println!(
        "logits also updated after the last pass: b[0] = {:.4?}",
        &last.b.data()[..3]
    );

    // Reordering the agreement loops leaves every fixed-point bit intact.
    let fmt = FxFormat::Q8_8;
    let uq = u.quantize(fmt);
    let vq = reference.v.quantize(fmt);
    let a = agreement_reference(&uq, &vq)?;
    for fact in [1, 2, 3, 4, 6, 9, 12, 36] {
        assert_eq!(a, agreement_parallel(&uq, &vq, fact)?);
    }
    println!("fixed-point agreement identical for every batch size");

    let fixed = route_reference(&uq, 3)?;
    println!(
        "Q8.8 routing class {} coupling row sums {:.4?}",
        argmax(&fixed.output_norms()),
        &fixed.coupling_row_sums()[..3]
    );
    Ok(())
}
