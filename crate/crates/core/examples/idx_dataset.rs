// Usage: cargo run --example idx_dataset [images.idx labels.idx]
//
// Reads an IDX image/label pair, or writes and reads a synthetic one.

use std::path::PathBuf;

use fastcaps::io::{load_idx_images, load_idx_labels, save_idx_images, save_idx_labels};

fn main() -> fastcaps::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let dir = tempfile::tempdir().map_err(|e| fastcaps::Error::io("<tempdir>", e))?;
    let (images, labels) = if let [i, l] = args.as_slice() {
        (PathBuf::from(i), PathBuf::from(l))
    } else {
        let (i, l) = (dir.path().join("images.idx"), dir.path().join("labels.idx"));
        let pixels: Vec<u8> = (0..4 * 28 * 28).map(|p| ((p * 31) % 256) as u8).collect();
        save_idx_images(&i, 4, 28, 28, &pixels)?;
        save_idx_labels(&l, &[3, 1, 4, 1])?;
        (i, l)
    };

    let batch = load_idx_images(&images)?;
    let labels = load_idx_labels(&labels)?;
    println!("images {:?} labels {}", batch.dims(), labels.len());
    let px = batch.data();
    println!(
        "pixel range [{:.3}, {:.3}]",
        px.iter().cloned().fold(f64::MAX, f64::min),
        px.iter().cloned().fold(f64::MIN, f64::max)
    );
    println!("first labels {:?}", &labels[..labels.len().min(8)]);
    Ok(())
}
