// Usage: cargo run --example fixed_point
//
// Q-format quantization, saturation and wide accumulation.

use fastcaps::fxp::{quantize, quantize_flagged, Fx16, FxFormat, WideAcc};

fn main() {
    let q = FxFormat::Q8_8;
    println!(
        "Q8.8: resolution {} range [{}, {}]",
        q.resolution(),
        q.min_value(),
        q.max_value()
    );

    for x in [0.1, -1.5, 2.3456, 0.001953125, 200.0] {
        let (v, saturated) = quantize_flagged(x, q);
        println!(
            "{x:>12} -> raw {:>6} = {:<12} saturated={saturated}",
            v.raw(),
            v.to_f64()
        );
    }

    // Ties round to even.
    let lsb = q.resolution();
    println!(
        "0.5 lsb -> {}, 1.5 lsb -> {}",
        quantize(0.5 * lsb, q).raw(),
        quantize(1.5 * lsb, q).raw()
    );

    // A dot product whose partial sums leave the 16-bit range still fits
    // the wide accumulator; only the writeback saturates.
    let a = quantize(100.0, q);
    let mut acc = WideAcc::zero(q);
    for _ in 0..4 {
        acc = acc.mac(a, a);
    }
    let (out, sat) = acc.writeback_flagged();
    println!(
        "4 x 100*100 = {} in the accumulator, writeback {} (saturated={sat})",
        acc.to_f64(),
        out.to_f64()
    );

    let q12 = FxFormat::new(12).unwrap();
    let third = Fx16::from_raw(1365, q12);
    println!("Q4.12 raw 1365 = {:.6}", third.to_f64());
}
