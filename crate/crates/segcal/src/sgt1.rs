//! The SGT1 tensor file format.
//!
//! Little-endian throughout: bytes 0-3 magic `SGT1`; byte 4 dtype code
//! (1 = f32, 2 = f64, 3 = u8); byte 5 rank r; then r u32 extents; then the
//! row-major payload. No padding, no checksum. Decoding validates the whole
//! header before touching the payload and never allocates more than the
//! input holds, so it is safe to point at untrusted bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SGT1";

/// Storage element types. In-memory tensors are always f64; f32 and u8 are
/// storage-only down-conversions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
    U8 = 3,
}

impl Dtype {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> std::result::Result<Dtype, FormatError> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            3 => Ok(Dtype::U8),
            _ => Err(FormatError::UnknownDtype { code }),
        }
    }

    pub fn element_size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
            Dtype::U8 => "u8",
        }
    }
}

/// Encode a tensor as SGT1 bytes with the requested storage dtype.
///
/// f32 narrows lossily by design; u8 requires every value to be an integer
/// in [0, 255] so that the round trip stays bit-exact.
pub fn encode(t: &Tensor, dtype: Dtype) -> Result<Vec<u8>> {
    let rank = t.rank();
    if rank > u8::MAX as usize {
        return Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: "rank exceeds 255".into(),
        });
    }
    for (axis, &e) in t.shape().iter().enumerate() {
        if e > u32::MAX as usize {
            return Err(Error::InvalidShape {
                shape: t.shape().to_vec(),
                reason: format!("extent on axis {axis} exceeds u32"),
            });
        }
    }
    let mut out = Vec::with_capacity(6 + 4 * rank + t.len() * dtype.element_size());
    out.extend_from_slice(&MAGIC);
    out.push(dtype.code());
    out.push(rank as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    match dtype {
        Dtype::F64 => {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Dtype::F32 => {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::U8 => {
            for (index, &v) in t.data().iter().enumerate() {
                if !v.is_finite() || !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                    return Err(FormatError::ValueNotRepresentable {
                        index,
                        value: v,
                        dtype: "u8",
                    }
                    .into());
                }
                out.push(v as u8);
            }
        }
    }
    Ok(out)
}

/// Decode SGT1 bytes into an f64 tensor. Rejects bad magic, unknown dtype
/// codes, truncated or oversized payloads, zero rank, and zero extents.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let (tensor, _) = decode_with_dtype(bytes)?;
    Ok(tensor)
}

/// Decode and also report the storage dtype the file used.
pub fn decode_with_dtype(bytes: &[u8]) -> Result<(Tensor, Dtype)> {
    if bytes.len() < 6 {
        return Err(FormatError::Truncated {
            expected: 6,
            got: bytes.len(),
        }
        .into());
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[0..4]);
    if magic != MAGIC {
        return Err(FormatError::BadMagic { found: magic }.into());
    }
    let dtype = Dtype::from_code(bytes[4])?;
    let rank = bytes[5] as usize;
    if rank == 0 {
        return Err(FormatError::ZeroRank.into());
    }
    let header_len = 6 + 4 * rank;
    if bytes.len() < header_len {
        return Err(FormatError::Truncated {
            expected: header_len,
            got: bytes.len(),
        }
        .into());
    }
    let mut shape = Vec::with_capacity(rank);
    let mut elements: usize = 1;
    for axis in 0..rank {
        let off = 6 + 4 * axis;
        let extent = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if extent == 0 {
            return Err(FormatError::BadExtent { axis, extent }.into());
        }
        elements = elements
            .checked_mul(extent as usize)
            .ok_or(FormatError::ElementCountOverflow)?;
        shape.push(extent as usize);
    }
    let payload_len = elements
        .checked_mul(dtype.element_size())
        .ok_or(FormatError::ElementCountOverflow)?;
    let expected = header_len
        .checked_add(payload_len)
        .ok_or(FormatError::ElementCountOverflow)?;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            got: bytes.len(),
        }
        .into());
    }
    if bytes.len() > expected {
        return Err(FormatError::TrailingBytes {
            extra: bytes.len() - expected,
        }
        .into());
    }
    let payload = &bytes[header_len..];
    let mut data = Vec::with_capacity(elements);
    match dtype {
        Dtype::F64 => {
            for chunk in payload.chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
        Dtype::F32 => {
            for chunk in payload.chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
        Dtype::U8 => {
            for &b in payload {
                data.push(b as f64);
            }
        }
    }
    Ok((Tensor::new(shape, data)?, dtype))
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    save_tensor_as(t, path, Dtype::F64)
}

pub fn save_tensor_as(t: &Tensor, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let bytes = encode(t, dtype)?;
    fs::write(path.as_ref(), bytes)
        .map_err(|e| Error::io(path.as_ref().display().to_string(), e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path.as_ref())
        .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
    decode(&bytes)
}
