use std::fmt;
use std::str::FromStr;

use half::{bf16, f16};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage element type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F16,
    BF16,
}

/// Quiet-NaN patterns written for any NaN input, one per dtype.
pub const CANONICAL_NAN_F32: u32 = 0x7fc0_0000;
pub const CANONICAL_NAN_F16: u16 = 0x7e00;
pub const CANONICAL_NAN_BF16: u16 = 0x7fc0;

impl Dtype {
    pub const fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }

    pub const fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
        }
    }

    /// Round a full-precision value to the nearest value representable in
    /// this dtype (ties to even). NaN stays NaN.
    pub fn quantize(self, v: f32) -> f32 {
        match self {
            Dtype::F32 => v,
            Dtype::F16 => f16::from_f32(v).to_f32(),
            Dtype::BF16 => bf16::from_f32(v).to_f32(),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dtype {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "F32" => Ok(Dtype::F32),
            "F16" => Ok(Dtype::F16),
            "BF16" => Ok(Dtype::BF16),
            other => Err(other.to_string()),
        }
    }
}

/// Decode little-endian storage bytes into `out`, replacing its contents.
pub fn decode_into(raw: &[u8], dtype: Dtype, out: &mut Vec<f32>) -> Result<()> {
    let size = dtype.size();
    if raw.len() % size != 0 {
        return Err(Error::RawLength {
            len: raw.len(),
            dtype,
        });
    }
    out.clear();
    out.reserve(raw.len() / size);
    match dtype {
        Dtype::F32 => out.extend(
            raw.chunks_exact(4)
                .map(|b| f32::from_bits(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))),
        ),
        Dtype::F16 => out.extend(
            raw.chunks_exact(2)
                .map(|b| f16::from_bits(u16::from_le_bytes([b[0], b[1]])).to_f32()),
        ),
        Dtype::BF16 => out.extend(
            raw.chunks_exact(2)
                .map(|b| bf16::from_bits(u16::from_le_bytes([b[0], b[1]])).to_f32()),
        ),
    }
    Ok(())
}

/// Encode values with round-to-nearest-even, appending to `out`.
/// Returns the largest absolute round-off among finite inputs.
pub fn encode_into(values: &[f32], dtype: Dtype, out: &mut Vec<u8>) -> f32 {
    out.reserve(values.len() * dtype.size());
    let mut max_err = 0.0f32;
    match dtype {
        Dtype::F32 => {
            for &v in values {
                let bits = if v.is_nan() {
                    CANONICAL_NAN_F32
                } else {
                    v.to_bits()
                };
                out.extend_from_slice(&bits.to_le_bytes());
            }
        }
        Dtype::F16 => {
            for &v in values {
                let bits = if v.is_nan() {
                    CANONICAL_NAN_F16
                } else {
                    let h = f16::from_f32(v);
                    track_roundoff(&mut max_err, v, h.to_f32());
                    h.to_bits()
                };
                out.extend_from_slice(&bits.to_le_bytes());
            }
        }
        Dtype::BF16 => {
            for &v in values {
                let bits = if v.is_nan() {
                    CANONICAL_NAN_BF16
                } else {
                    let h = bf16::from_f32(v);
                    track_roundoff(&mut max_err, v, h.to_f32());
                    h.to_bits()
                };
                out.extend_from_slice(&bits.to_le_bytes());
            }
        }
    }
    max_err
}

#[inline]
fn track_roundoff(max_err: &mut f32, v: f32, stored: f32) {
    // overflow to infinity is not round-off in the ulp sense
    if v.is_finite() && stored.is_finite() {
        let err = (stored - v).abs();
        if err > *max_err {
            *max_err = err;
        }
    }
}

pub fn decode_dtype(raw: &[u8], dtype: Dtype) -> Result<Vec<f32>> {
    let mut out = Vec::new();
    decode_into(raw, dtype, &mut out)?;
    Ok(out)
}

pub fn encode_dtype(values: &[f32], dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::new();
    encode_into(values, dtype, &mut out);
    out
}
