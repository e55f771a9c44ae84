// Usage: cargo run --example dead_structure
//
// Pruned conv1 channels starve PrimaryCaps kernels; whole capsule types
// disappear from routing.

use fastcaps::capsnet::{CapsNetModel, CapsNetSpec};
use fastcaps::cli::layer_stack;
use fastcaps::pruning::{compression_report, lakp_prune, propagate_dead_structures, Granularity, NetTopology};

fn main() -> fastcaps::Result<()> {
    let spec = CapsNetSpec::mnist();
    let model = CapsNetModel::random(spec, 42)?;
    let stack = layer_stack(
        &model,
        [0.9, 25.0 / 32.0],
        [Granularity::Kernel, Granularity::CapsuleGroup],
    )?;
    let outcome = lakp_prune(&stack)?;

    let dead = propagate_dead_structures(&outcome.masks, &NetTopology::from_spec(&spec))?;
    println!("fixpoint after {} sweep(s)", dead.iterations);
    println!("conv1 channels alive: {}", dead.live_channels[0].len());
    println!("capsule types alive: {:?}", dead.live_capsule_types);
    println!("capsules {} -> {}", spec.in_caps(), dead.surviving_capsules());
    println!(
        "routing weights {} -> {}",
        spec.routing_weight_count(),
        dead.routing_weight_count()
    );

    let compact = model.apply_structure(&dead)?.compact(&dead)?;
    println!(
        "compacted model: conv1 {:?}, digit {:?}",
        compact.conv1().kernels().dims(),
        compact.digit().dims()
    );

    for line in compression_report(&outcome.masks, &spec)?.to_kv_lines() {
        println!("{line}");
    }
    Ok(())
}
