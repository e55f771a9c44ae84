//! `FASTCAPS` weight container.
//!
//! ```text
//! magic        8  "FASTCAPS"
//! version      u32 (1)
//! tensor_count u32
//! per tensor:
//!   name_len u16, name (UTF-8)
//!   dtype    u8   0 = f32, 1 = i16 fixed point
//!   frac     u8   fraction bits (0 for f32)
//!   ndim     u8
//!   dims     ndim × u32
//!   payload  product(dims) × 4 or × 2 bytes, row-major
//! ```

use std::collections::HashSet;
use std::path::Path;

use super::{read_file, with_path, write_file, FormatError, Reader};
use crate::capsnet::{CapsNetModel, CapsNetSpec, ConvSpec, DigitCapsSpec, PrimaryCapsSpec, RoutingConfig};
use crate::error::{Error, Result};
use crate::fxp::{Fx16, FxFormat};
use crate::tensor::{ConvLayerWeights, Tensor};

pub const CONTAINER_MAGIC: &[u8; 8] = b"FASTCAPS";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    Fixed { frac_bits: u8, raw: Vec<i16> },
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::Fixed { raw, .. } => raw.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One named tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

impl StoredTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, payload: Payload) -> Result<Self> {
        let t = StoredTensor {
            name: name.into(),
            dims,
            payload,
        };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        if self.name.len() > usize::from(u16::MAX) {
            return Err(Error::InvalidArgument(format!(
                "tensor name `{}` is too long",
                self.name
            )));
        }
        if self.dims.len() > usize::from(u8::MAX) || self.dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::InvalidArgument(format!(
                "tensor `{}` dims do not fit the format",
                self.name
            )));
        }
        let n: usize = self.dims.iter().product();
        if n != self.payload.len() {
            return Err(Error::shape(format!(
                "tensor `{}`: dims {:?} need {n} values, payload has {}",
                self.name,
                self.dims,
                self.payload.len()
            )));
        }
        if let Payload::Fixed { frac_bits, .. } = self.payload {
            FxFormat::new(frac_bits.into())?;
        }
        Ok(())
    }

    /// Stores a real tensor as f32.
    pub fn from_real(name: impl Into<String>, t: &Tensor<f64>) -> Result<Self> {
        Self::new(
            name,
            t.dims().to_vec(),
            Payload::F32(t.data().iter().map(|&x| x as f32).collect()),
        )
    }

    pub fn from_fixed(name: impl Into<String>, t: &Tensor<Fx16>, fmt: FxFormat) -> Result<Self> {
        if t.format().is_some_and(|f| f != fmt) {
            return Err(Error::shape("tensor format differs from the declared format"));
        }
        Self::new(
            name,
            t.dims().to_vec(),
            Payload::Fixed {
                frac_bits: fmt.frac_bits() as u8,
                raw: t.data().iter().map(|x| x.raw()).collect(),
            },
        )
    }

    /// Real values of either payload kind.
    pub fn to_real(&self) -> Result<Tensor<f64>> {
        let data = match &self.payload {
            Payload::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            Payload::Fixed { frac_bits, raw } => {
                let scale = f64::from(*frac_bits).exp2();
                raw.iter().map(|&r| f64::from(r) / scale).collect()
            }
        };
        Tensor::from_vec(self.dims.clone(), data)
    }

    /// The fixed-point tensor. Only valid for fixed-point payloads.
    pub fn to_fixed(&self) -> Result<Tensor<Fx16>> {
        match &self.payload {
            Payload::Fixed { frac_bits, raw } => {
                let fmt = FxFormat::new((*frac_bits).into())?;
                Tensor::from_vec(self.dims.clone(), raw.iter().map(|&r| Fx16::from_raw(r, fmt)).collect())
            }
            Payload::F32(_) => Err(Error::InvalidArgument(format!(
                "tensor `{}` is stored as float32, not fixed point",
                self.name
            ))),
        }
    }
}

fn check_unique<'a>(names: impl Iterator<Item = &'a str>) -> Option<&'a str> {
    let mut seen = HashSet::new();
    names.into_iter().find(|n| !seen.insert(*n))
}

pub fn encode_weights(tensors: &[StoredTensor]) -> Result<Vec<u8>> {
    if let Some(dup) = check_unique(tensors.iter().map(|t| t.name.as_str())) {
        return Err(Error::InvalidArgument(format!("duplicate tensor name `{dup}`")));
    }
    let count = u32::try_from(tensors.len()).map_err(|_| Error::InvalidArgument("too many tensors".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for t in tensors {
        t.validate()?;
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        let (dtype, frac) = match &t.payload {
            Payload::F32(_) => (0u8, 0u8),
            Payload::Fixed { frac_bits, .. } => (1, *frac_bits),
        };
        out.extend_from_slice(&[dtype, frac, t.dims.len() as u8]);
        for &d in &t.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &t.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Fixed { raw, .. } => raw.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<Vec<StoredTensor>, FormatError> {
    let mut r = Reader::new(bytes);
    if r.take(8, "magic")? != CONTAINER_MAGIC {
        return Err(FormatError::new(0, "bad magic, expected FASTCAPS"));
    }
    let at = r.pos();
    let version = r.u32_le("version")?;
    if version != CONTAINER_VERSION {
        return Err(FormatError::new(at, format!("unsupported version {version}")));
    }
    let count = r.u32_le("tensor count")?;
    let mut tensors = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let start = r.pos();
        let name_len = r.u16_le("name length")?;
        let name_at = r.pos();
        let name = std::str::from_utf8(r.take(name_len.into(), "tensor name")?)
            .map_err(|_| FormatError::new(name_at, "tensor name is not UTF-8"))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(FormatError::new(start, format!("duplicate tensor name `{name}`")));
        }
        let dtype_at = r.pos();
        let dtype = r.u8("dtype")?;
        let frac = r.u8("frac bits")?;
        let ndim = r.u8("ndim")?;
        match (dtype, frac) {
            (0, 0) => {}
            (0, _) => return Err(FormatError::new(dtype_at + 1, "float32 tensor with nonzero frac bits")),
            (1, 1..=15) => {}
            (1, f) => return Err(FormatError::new(dtype_at + 1, format!("invalid frac bits {f}"))),
            (d, _) => return Err(FormatError::new(dtype_at, format!("unknown dtype {d}"))),
        }
        let mut dims = Vec::with_capacity(ndim.into());
        for _ in 0..ndim {
            dims.push(r.u32_le("dims")? as usize);
        }
        let width = if dtype == 0 { 4 } else { 2 };
        let payload_at = r.pos();
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(width).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| FormatError::new(payload_at, format!("payload for dims {dims:?} exceeds the file")))?;
        let raw = r.take(n * width, "payload")?;
        let payload = if dtype == 0 {
            Payload::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        } else {
            Payload::Fixed {
                frac_bits: frac,
                raw: raw
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            }
        };
        tensors.push(StoredTensor { name, dims, payload });
    }
    if !r.is_empty() {
        return Err(r.err(format!("{} trailing bytes", r.remaining())));
    }
    Ok(tensors)
}

pub fn save_weights(path: impl AsRef<Path>, tensors: &[StoredTensor]) -> Result<()> {
    write_file(path.as_ref(), &encode_weights(tensors)?)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Vec<StoredTensor>> {
    let path = path.as_ref();
    with_path(path, decode_weights(&read_file(path)?))
}

const ARCH: &str = "arch";

/// The tensors describing a model: `conv1.weight`, `conv1.bias`,
/// `primary.weight`, `primary.bias`, `digit.weight`, and `arch` holding
/// `[input_h, input_w, conv1_stride, primary_stride]`.
pub fn model_tensors(model: &CapsNetModel<f64>) -> Result<Vec<StoredTensor>> {
    let s = model.spec();
    let arch = [s.input_h, s.input_w, s.conv1.stride, s.primary.stride].map(|v| v as f32);
    Ok(vec![
        StoredTensor::new(ARCH, vec![4], Payload::F32(arch.to_vec()))?,
        StoredTensor::from_real("conv1.weight", model.conv1().kernels())?,
        StoredTensor::from_real("conv1.bias", model.conv1().bias())?,
        StoredTensor::from_real("primary.weight", model.primary().kernels())?,
        StoredTensor::from_real("primary.bias", model.primary().bias())?,
        StoredTensor::from_real("digit.weight", model.digit())?,
    ])
}

/// Rebuilds a model from [`model_tensors`] output. Without an `arch` tensor,
/// a 28×28 input with conv strides 1 and 2 is assumed.
pub fn model_from_tensors(tensors: &[StoredTensor], routing: RoutingConfig) -> Result<CapsNetModel<f64>> {
    let find = |name: &str| {
        tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("weights lack tensor `{name}`")))
            .and_then(StoredTensor::to_real)
    };
    let arch: Vec<usize> = match tensors.iter().find(|t| t.name == ARCH) {
        Some(t) => {
            let v = t.to_real()?;
            if v.len() != 4 || v.data().iter().any(|&x| x < 1.0 || x.fract() != 0.0 || x > 1e6) {
                return Err(Error::InvalidArgument("`arch` must hold four positive integers".into()));
            }
            v.data().iter().map(|&x| x as usize).collect()
        }
        None => vec![28, 28, 1, 2],
    };
    let conv1_w = find("conv1.weight")?;
    let primary_w = find("primary.weight")?;
    let digit = find("digit.weight")?;
    let (&[c1, cin, k1, _], &[pc, _, kp, _], &[_, count, dim, caps_dim]) =
        (conv1_w.dims(), primary_w.dims(), digit.dims())
    else {
        return Err(Error::shape("conv weights must be rank 4 and routing weights rank 4"));
    };
    if caps_dim == 0 || pc % caps_dim != 0 {
        return Err(Error::shape(format!(
            "{pc} primary channels do not split into {caps_dim}-d capsules"
        )));
    }
    let spec = CapsNetSpec {
        input_channels: cin,
        input_h: arch[0],
        input_w: arch[1],
        conv1: ConvSpec {
            out_channels: c1,
            kernel: k1,
            stride: arch[2],
        },
        primary: PrimaryCapsSpec {
            capsule_types: pc / caps_dim,
            caps_dim,
            kernel: kp,
            stride: arch[3],
        },
        digit: DigitCapsSpec { count, dim },
        routing,
    };
    spec.validate()?;
    let conv1 = ConvLayerWeights::new(conv1_w, find("conv1.bias")?, spec.conv1.stride)?;
    let primary = ConvLayerWeights::new(primary_w, find("primary.bias")?, spec.primary.stride)?;
    CapsNetModel::new(spec, conv1, primary, digit)
}

pub fn save_model(path: impl AsRef<Path>, model: &CapsNetModel<f64>) -> Result<()> {
    save_weights(path, &model_tensors(model)?)
}

pub fn load_model(path: impl AsRef<Path>, routing: RoutingConfig) -> Result<CapsNetModel<f64>> {
    model_from_tensors(&load_weights(path)?, routing)
}
