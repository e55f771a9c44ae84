// Usage: cargo run --example convolution
//
// Dense and kernel-masked 2-D convolution with MAC counting.

use fastcaps::pruning::{Granularity, LayerMask};
use fastcaps::tensor::{conv2d, conv2d_counted, count_mac_ops, ConvLayerWeights, Tensor};

fn main() -> fastcaps::Result<()> {
    let (c_in, c_out, k) = (2, 3, 3);
    let input = Tensor::from_fn(vec![c_in, 8, 8], |i| ((i * 37) % 11) as f64 / 10.0 - 0.5)?;
    let kernels = Tensor::from_fn(vec![c_out, c_in, k, k], |i| ((i % 5) as f64 - 2.0) / 4.0)?;
    let bias = Tensor::from_vec(vec![c_out], vec![0.1, 0.0, -0.1])?;
    let w = ConvLayerWeights::new(kernels, bias, 1)?;

    let (dense, macs) = conv2d_counted(&input, &w, None)?;
    println!("output {:?}, {macs} MACs", dense.dims());

    // Kill kernel (output 1, input 0) and every kernel of output 2.
    let mut mask = LayerMask::all_alive("demo", Granularity::Kernel, c_out * c_in);
    for unit in [c_in, 2 * c_in, 2 * c_in + 1] {
        mask.kill(unit);
    }
    let (sparse, sparse_macs) = conv2d_counted(&input, &w, Some(&mask))?;
    assert_eq!(sparse_macs, count_mac_ops(&w, Some(&mask), (c_in, 8, 8))?);
    println!(
        "masked: {sparse_macs} MACs, {} of {} kernels live",
        mask.survivors(),
        mask.unit_count()
    );
    println!("channel 0 unchanged: {}", dense.data()[..36] == sparse.data()[..36]);
    println!("channel 2 is bias only: {:?}", &sparse.data()[72..76]);

    let strided = ConvLayerWeights::new(w.kernels().clone(), w.bias().clone(), 2)?;
    println!("stride 2 output {:?}", conv2d(&input, &strided, None)?.dims());

    let fixed = conv2d(
        &input.quantize(fastcaps::fxp::FxFormat::Q8_8),
        &w.map(|x| fastcaps::fxp::quantize(x, fastcaps::fxp::FxFormat::Q8_8)),
        None,
    )?;
    let err = fixed
        .to_real()
        .data()
        .iter()
        .zip(dense.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("Q8.8 convolution max error {err:.4}");
    Ok(())
}
