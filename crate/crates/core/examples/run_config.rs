// Usage: cargo run --example run_config
//
// Parsing a run configuration and the errors it reports.

use fastcaps::io::parse_config_str;

const CONFIG: &str = "\
# 252-capsule network
sparsity.conv1   = 0.9
sparsity.primary = 0.78125
mode = optimized
fact = 10
pe_count = 10
cost.exp_optimized = 14
";

fn main() -> fastcaps::Result<()> {
    let cfg = parse_config_str(CONFIG)?;
    println!("sparsity {:?} granularity {:?}", cfg.sparsity, cfg.granularity);
    println!(
        "routing {} over {} iterations, {} PEs",
        cfg.routing_mode(),
        cfg.routing_iters,
        cfg.pe_count
    );
    println!("format Q{}.{}", 16 - cfg.frac_bits, cfg.frac_bits);

    for bad in [
        "routing_iters = 0",
        "sparsity.conv1 = 1.5",
        "frac_bits = 3\nfrac_bits = 4",
        "turbo = on",
    ] {
        println!(
            "{:<28} -> {}",
            bad.replace('\n', "; "),
            parse_config_str(bad).unwrap_err()
        );
    }
    Ok(())
}
