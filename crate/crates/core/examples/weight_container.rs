// Usage: cargo run --example weight_container
//
// Saving and loading models and prune masks.

use fastcaps::capsnet::{tiny_spec, CapsNetModel, RoutingConfig};
use fastcaps::fxp::FxFormat;
use fastcaps::io::{decode_weights, encode_weights, load_masks, load_model, save_masks, save_model, StoredTensor};
use fastcaps::pruning::{Granularity, LayerMask};

fn main() -> fastcaps::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| fastcaps::Error::io("<tempdir>", e))?;
    let model = CapsNetModel::random(tiny_spec(), 3)?;

    let path = dir.path().join("tiny.fcw");
    save_model(&path, &model)?;
    let back = load_model(&path, RoutingConfig::default())?;
    // Real payloads are stored as f32.
    let err = back
        .digit()
        .data()
        .iter()
        .zip(model.digit().data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!(
        "{} bytes, max round-trip error {err:.1e}",
        std::fs::metadata(&path).unwrap().len()
    );

    // Fixed-point payloads keep their fractional bit count.
    let fmt = FxFormat::new(12).unwrap();
    let t = StoredTensor::from_fixed("digit.q12", &model.digit().quantize(fmt), fmt)?;
    let bytes = encode_weights(&[t])?;
    let decoded = decode_weights(&bytes).map_err(fastcaps::Error::FormatBytes)?;
    println!("{}: dims {:?}, {} bytes", decoded[0].name, decoded[0].dims, bytes.len());

    let mut kernels = LayerMask::all_alive("conv1", Granularity::Kernel, 8);
    kernels.kill(2);
    let types = LayerMask::from_units("primary", Granularity::CapsuleGroup, vec![true, false, true, true]);
    let mpath = dir.path().join("tiny.mask");
    save_masks(&mpath, &[kernels, types])?;
    for m in load_masks(&mpath)? {
        println!("{} {} alive {:?}", m.name(), m.granularity(), m.surviving_indices());
    }

    let mut corrupt = bytes.clone();
    corrupt.truncate(bytes.len() - 3);
    println!("truncated container: {}", decode_weights(&corrupt).unwrap_err());
    Ok(())
}
