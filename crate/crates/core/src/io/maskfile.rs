//! `FCAPMASK` prune-mask file.
//!
//! ```text
//! magic       8  "FCAPMASK"
//! version     u32 (1)
//! layer_count u32
//! per layer:
//!   name_len    u16, name (UTF-8)
//!   granularity u8   0 = kernel, 1 = capsule group
//!   unit_count  u32  kernels, or capsule groups
//!   bitset      ceil(unit_count / 8) bytes, unit i at bit i % 8 of byte i / 8
//!   index_count u32
//!   indices     index_count × u32, the surviving unit ids in ascending order
//! ```
//!
//! The bitset and the index list must describe the same set.

use std::path::Path;

use super::{read_file, with_path, write_file, FormatError, Reader};
use crate::error::{Error, Result};
use crate::pruning::{Granularity, LayerMask};

pub const MASK_MAGIC: &[u8; 8] = b"FCAPMASK";
pub const MASK_VERSION: u32 = 1;

pub fn encode_masks(masks: &[LayerMask]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&MASK_VERSION.to_le_bytes());
    out.extend_from_slice(&(masks.len() as u32).to_le_bytes());
    for m in masks {
        let name = m.name().as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("mask name `{}` too long", m.name())))?;
        let units = u32::try_from(m.unit_count())
            .map_err(|_| Error::InvalidArgument(format!("mask `{}` has too many units", m.name())))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(m.granularity().code());
        out.extend_from_slice(&units.to_le_bytes());
        let mut bits = vec![0u8; m.unit_count().div_ceil(8)];
        for (i, _) in m.units().iter().enumerate().filter(|(_, &a)| a) {
            bits[i / 8] |= 1 << (i % 8);
        }
        out.extend_from_slice(&bits);
        let indices = m.surviving_indices();
        out.extend_from_slice(&(indices.len() as u32).to_le_bytes());
        for i in indices {
            out.extend_from_slice(&i.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_masks(bytes: &[u8]) -> Result<Vec<LayerMask>, FormatError> {
    let mut r = Reader::new(bytes);
    if r.take(8, "magic")? != MASK_MAGIC {
        return Err(FormatError::new(0, "bad magic, expected FCAPMASK"));
    }
    let at = r.pos();
    let version = r.u32_le("version")?;
    if version != MASK_VERSION {
        return Err(FormatError::new(at, format!("unsupported version {version}")));
    }
    let count = r.u32_le("layer count")?;
    let mut masks = Vec::new();
    for _ in 0..count {
        let name_len = r.u16_le("name length")?;
        let name_at = r.pos();
        let name = std::str::from_utf8(r.take(name_len.into(), "layer name")?)
            .map_err(|_| FormatError::new(name_at, "layer name is not UTF-8"))?
            .to_string();
        let g_at = r.pos();
        let code = r.u8("granularity")?;
        let granularity = Granularity::from_code(code)
            .ok_or_else(|| FormatError::new(g_at, format!("unknown granularity {code}")))?;
        let units = r.u32_le("unit count")? as usize;
        let bits_at = r.pos();
        let bits = r.take(units.div_ceil(8), "bitset")?;
        let alive: Vec<bool> = (0..units).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        if !units.is_multiple_of(8) && bits[units / 8] >> (units % 8) != 0 {
            return Err(FormatError::new(bits_at + units / 8, "bits set past the unit count"));
        }
        let idx_at = r.pos();
        let n_idx = r.u32_le("index count")? as usize;
        let popcount = alive.iter().filter(|&&a| a).count();
        if n_idx != popcount {
            return Err(FormatError::new(
                idx_at,
                format!("integrity: {n_idx} indices but {popcount} surviving bits"),
            ));
        }
        let list_at = r.pos();
        let raw = r.take(n_idx * 4, "index list")?;
        let expected = alive.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i as u32);
        for (k, (chunk, want)) in raw.chunks_exact(4).zip(expected).enumerate() {
            let got = u32::from_le_bytes(chunk.try_into().unwrap());
            if got != want {
                return Err(FormatError::new(
                    list_at + 4 * k,
                    format!("integrity: index {got} does not match bitset (expected {want})"),
                ));
            }
        }
        masks.push(LayerMask::from_units(name, granularity, alive));
    }
    if !r.is_empty() {
        return Err(r.err(format!("{} trailing bytes", r.remaining())));
    }
    Ok(masks)
}

pub fn save_masks(path: impl AsRef<Path>, masks: &[LayerMask]) -> Result<()> {
    write_file(path.as_ref(), &encode_masks(masks)?)
}

pub fn load_masks(path: impl AsRef<Path>) -> Result<Vec<LayerMask>> {
    let path = path.as_ref();
    with_path(path, decode_masks(&read_file(path)?))
}
