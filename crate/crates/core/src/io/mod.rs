//! File formats: the `FASTCAPS` weight container, the `FCAPMASK` prune-mask
//! file, IDX datasets and the `key = value` run configuration.
//!
//! All binary integers are little-endian except IDX, which is big-endian.
//! Parsers work on in-memory bytes, check every declared length against the
//! bytes actually present, and report failures as [`FormatError`] with the
//! offending byte offset.

mod config;
mod container;
mod idx;
mod maskfile;

pub use config::{parse_config, parse_config_str, Arith, RunConfig, LAYER_NAMES};
pub use container::{
    decode_weights, encode_weights, load_model, load_weights, model_from_tensors, model_tensors, save_model,
    save_weights, Payload, StoredTensor, CONTAINER_MAGIC, CONTAINER_VERSION,
};
pub use idx::{
    decode_idx, encode_idx_images, encode_idx_labels, load_idx, load_idx_images, load_idx_labels, save_idx_images,
    save_idx_labels, IdxData, IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC,
};
pub use maskfile::{decode_masks, encode_masks, load_masks, save_masks, MASK_MAGIC, MASK_VERSION};

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};

/// Malformed binary input.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("at byte offset {offset}: {message}")]
pub struct FormatError {
    pub offset: u64,
    pub message: String,
}

impl FormatError {
    pub fn new(offset: usize, message: impl Into<String>) -> Self {
        FormatError {
            offset: offset as u64,
            message: message.into(),
        }
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn with_path<T>(path: &Path, r: Result<T, FormatError>) -> Result<T> {
    r.map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

/// Bounds-checked cursor over a byte slice.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    pub fn err(&self, message: impl Into<String>) -> FormatError {
        FormatError::new(self.pos, message)
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        if n > self.remaining() {
            return Err(self.err(format!("truncated {what}: need {n} bytes, {} left", self.remaining())));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N], FormatError> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self, what: &str) -> Result<u8, FormatError> {
        Ok(self.array::<1>(what)?[0])
    }

    pub fn u16_le(&mut self, what: &str) -> Result<u16, FormatError> {
        self.array(what).map(u16::from_le_bytes)
    }

    pub fn u32_le(&mut self, what: &str) -> Result<u32, FormatError> {
        self.array(what).map(u32::from_le_bytes)
    }

    pub fn u32_be(&mut self, what: &str) -> Result<u32, FormatError> {
        self.array(what).map(u32::from_be_bytes)
    }
}
