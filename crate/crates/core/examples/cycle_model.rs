// Usage: cargo run --example cycle_model
//
// Baseline versus optimized routing latency on a 10-PE array, unpruned and
// pruned to 252 capsules.

use fastcaps::accel::{routing_cycle_report, throughput_estimate, CostTable, PEArraySpec, Schedule};
use fastcaps::capsnet::{CapsNetModel, CapsNetSpec};
use fastcaps::cli::layer_stack;
use fastcaps::pruning::{lakp_prune, propagate_dead_structures, Granularity, NetTopology};

fn main() -> fastcaps::Result<()> {
    let spec = CapsNetSpec::mnist();
    let (costs, pe) = (CostTable::default(), PEArraySpec::default());

    let report = routing_cycle_report(&spec, &costs, &pe, 10)?;
    print!("{}", report.to_table());

    let model = CapsNetModel::random(spec, 0)?;
    let stack = layer_stack(
        &model,
        [0.9, 25.0 / 32.0],
        [Granularity::Kernel, Granularity::CapsuleGroup],
    )?;
    let dead = propagate_dead_structures(&lakp_prune(&stack)?.masks, &NetTopology::from_spec(&spec))?;

    let clock = 100e6;
    for (label, d) in [("unpruned", None), ("pruned", Some(&dead))] {
        let base = throughput_estimate(&spec, d, &costs, &pe, 10, clock, Schedule::Baseline)?;
        let opt = throughput_estimate(&spec, d, &costs, &pe, 10, clock, Schedule::Optimized)?;
        println!(
            "{label:<9} baseline {:>9.2} fps  optimized {:>9.2} fps  ({:.1}x)",
            base.fps,
            opt.fps,
            opt.fps / base.fps
        );
    }

    let single = PEArraySpec {
        pe_count: 1,
        mac_width: 1,
        pipeline_ii: 1,
        pipelined: false,
    };
    let r1 = routing_cycle_report(&spec, &costs, &single, 10)?;
    println!(
        "single PE: baseline {} optimized {} cycles",
        r1.total_baseline(),
        r1.total_optimized()
    );
    Ok(())
}
