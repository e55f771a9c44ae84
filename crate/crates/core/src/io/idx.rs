//! IDX datasets (MNIST, Fashion-MNIST). Big-endian header, `u8` payload.

use std::path::Path;

use super::{read_file, with_path, write_file, FormatError, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    /// `(n, rows, cols)`, pixel values divided by 255.
    Images(Tensor<f64>),
    Labels(Vec<u8>),
}

pub fn decode_idx(bytes: &[u8]) -> Result<IdxData, FormatError> {
    let mut r = Reader::new(bytes);
    let magic = r.u32_be("magic")?;
    let ndim = match magic {
        IDX_IMAGE_MAGIC => 3,
        IDX_LABEL_MAGIC => 1,
        other => return Err(FormatError::new(0, format!("unknown IDX magic {other:#010x}"))),
    };
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(r.u32_be("dimension")? as usize);
    }
    let payload_at = r.pos();
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n <= r.remaining())
        .ok_or_else(|| FormatError::new(payload_at, format!("truncated payload for dims {dims:?}")))?;
    let payload = r.take(n, "payload")?;
    if !r.is_empty() {
        return Err(r.err(format!("{} trailing bytes", r.remaining())));
    }
    Ok(if ndim == 3 {
        let data = payload.iter().map(|&p| f64::from(p) / 255.0).collect();
        IdxData::Images(Tensor::from_vec(dims, data).expect("length checked"))
    } else {
        if let Some(k) = payload.iter().position(|&l| l > 9) {
            return Err(FormatError::new(
                payload_at + k,
                format!("label {} outside 0..=9", payload[k]),
            ));
        }
        IdxData::Labels(payload.to_vec())
    })
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxData> {
    let path = path.as_ref();
    with_path(path, decode_idx(&read_file(path)?))
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    let path = path.as_ref();
    match load_idx(path)? {
        IdxData::Images(t) => Ok(t),
        IdxData::Labels(_) => with_path(path, Err(FormatError::new(0, "expected image magic 0x00000803"))),
    }
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    match load_idx(path)? {
        IdxData::Labels(l) => Ok(l),
        IdxData::Images(_) => with_path(path, Err(FormatError::new(0, "expected label magic 0x00000801"))),
    }
}

pub fn encode_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if n * rows * cols != pixels.len() {
        return Err(Error::shape(format!(
            "{n}x{rows}x{cols} images need {} pixels, got {}",
            n * rows * cols,
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Writes an image file; `pixels` is row-major `(n, rows, cols)`.
pub fn save_idx_images(path: impl AsRef<Path>, n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    write_file(path.as_ref(), &encode_idx_images(n, rows, cols, pixels)?)
}

pub fn save_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    write_file(path.as_ref(), &encode_idx_labels(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_image() {
        let bytes = encode_idx_images(1, 28, 28, &[0; 784]).unwrap();
        match decode_idx(&bytes).unwrap() {
            IdxData::Images(t) => {
                assert_eq!(t.dims(), &[1, 28, 28]);
                assert!(t.data().iter().all(|&x| x == 0.0));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pixel_scaling_and_labels() {
        let bytes = encode_idx_images(1, 1, 2, &[255, 51]).unwrap();
        let IdxData::Images(t) = decode_idx(&bytes).unwrap() else {
            panic!()
        };
        assert_eq!(t.data(), &[1.0, 0.2]);
        let IdxData::Labels(l) = decode_idx(&encode_idx_labels(&[3, 0, 9])).unwrap() else {
            panic!()
        };
        assert_eq!(l, vec![3, 0, 9]);
        assert!(decode_idx(&encode_idx_labels(&[10])).is_err());
    }

    #[test]
    fn label_file_with_image_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.idx");
        std::fs::write(&p, encode_idx_images(1, 2, 2, &[0; 4]).unwrap()).unwrap();
        let e = load_idx_labels(&p).unwrap_err().to_string();
        assert!(e.contains("expected label magic"), "{e}");
    }

    #[test]
    fn truncation() {
        let bytes = encode_idx_images(2, 3, 3, &[7; 18]).unwrap();
        for cut in 0..bytes.len() {
            assert!(decode_idx(&bytes[..cut]).is_err());
        }
    }
}
