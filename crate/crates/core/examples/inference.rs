// Usage: cargo run --example inference
//
// End-to-end CapsNet classification in f64 and Q8.8, reference and
// optimized routing.

use fastcaps::capsnet::{infer, infer_trace, CapsNetModel, CapsNetSpec, RoutingMode};
use fastcaps::fxp::FxFormat;
use fastcaps::tensor::Tensor;

fn main() -> fastcaps::Result<()> {
    let model = CapsNetModel::random(CapsNetSpec::mnist(), 7)?;
    let image = Tensor::from_fn(vec![1, 28, 28], |i| {
        let (y, x) = (i / 28, i % 28);
        if (8..20).contains(&y) && (12..16).contains(&x) {
            1.0
        } else {
            0.0
        }
    })?;

    let trace = infer_trace(&image, &model, RoutingMode::Reference)?;
    println!(
        "conv1 {:?} -> primary {:?} -> capsules {:?}",
        trace.conv1.dims(),
        trace.primary.dims(),
        trace.capsules.dims()
    );
    println!(
        "reference: class {} margin {:.4}",
        trace.result.class,
        trace.result.margin()
    );

    let opt = infer(&image, &model, RoutingMode::Optimized { fact: 10 })?;
    println!("optimized: class {} norms {:.4?}", opt.class, opt.caps_norms);

    let fmt = FxFormat::Q8_8;
    let fixed = infer(&image.quantize(fmt), &model.quantize(fmt), RoutingMode::Reference)?;
    println!("Q8.8:      class {} norms {:.4?}", fixed.class, fixed.caps_norms);
    Ok(())
}
