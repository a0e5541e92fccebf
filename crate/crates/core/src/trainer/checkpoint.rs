//! `SAEW` weights container.
//!
//! ```text
//! "SAEW" | version: u32 LE | header_len: u32 LE | header: UTF-8 JSON | arrays
//! ```
//!
//! The JSON header carries the [`SaeConfig`], the element dtype and the
//! ordered list of `{name, shape}` array descriptors. Arrays follow back to
//! back as raw little-endian values in that order. Required arrays are
//! `enc_weights [m, n]`, `enc_bias [m]`, `dec_rows [m, n]` and `dec_bias [n]`;
//! `jump_thresholds [m]` and `batchtopk_threshold [1]` are optional.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::sae::{Sae, SaeConfig};
use crate::scalar::{read_as, Dtype, Scalar};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"SAEW";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayDesc {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsHeader {
    pub config: SaeConfig,
    pub dtype: Dtype,
    pub arrays: Vec<ArrayDesc>,
}

fn desc(name: &str, shape: &[usize]) -> ArrayDesc {
    ArrayDesc {
        name: name.to_string(),
        shape: shape.to_vec(),
    }
}

fn push_all<T: Scalar>(out: &mut Vec<u8>, values: impl Iterator<Item = T>, dtype: Dtype) {
    for v in values {
        match dtype {
            Dtype::F32 => v.to_f32_lossy().push_le(out),
            Dtype::F64 => v.to_f64_lossy().push_le(out),
        }
    }
}

/// Serializes `sae` with elements stored as `dtype`.
pub fn encode_checkpoint<T: Scalar>(sae: &Sae<T>, dtype: Dtype) -> Result<Vec<u8>> {
    sae.validate()?;
    let (m, n) = (sae.m(), sae.n());
    let mut arrays = vec![
        desc("enc_weights", &[m, n]),
        desc("enc_bias", &[m]),
        desc("dec_rows", &[m, n]),
        desc("dec_bias", &[n]),
    ];
    if sae.jump_thresholds.is_some() {
        arrays.push(desc("jump_thresholds", &[m]));
    }
    if sae.batchtopk_threshold.is_some() {
        arrays.push(desc("batchtopk_threshold", &[1]));
    }
    let header = serde_json::to_vec(&WeightsHeader {
        config: sae.config.clone(),
        dtype,
        arrays,
    })?;
    let header_len = u32::try_from(header.len()).map_err(|_| Error::SizeOverflow("weights header".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    push_all(&mut out, sae.enc_weights.iter().copied(), dtype);
    push_all(&mut out, sae.enc_bias.iter().copied(), dtype);
    push_all(&mut out, sae.dec_rows.iter().copied(), dtype);
    push_all(&mut out, sae.dec_bias.iter().copied(), dtype);
    if let Some(t) = &sae.jump_thresholds {
        push_all(&mut out, t.iter().copied(), dtype);
    }
    if let Some(t) = sae.batchtopk_threshold {
        push_all(&mut out, std::iter::once(t), dtype);
    }
    Ok(out)
}

/// Parses the JSON header; returns it with the byte offset of the first array.
pub fn read_weights_header(bytes: &[u8]) -> Result<(WeightsHeader, usize)> {
    if bytes.len() < 4 || bytes[..4] != WEIGHTS_MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(Error::TruncatedPayload);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != WEIGHTS_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < header_len {
        return Err(Error::TruncatedPayload);
    }
    let header: WeightsHeader =
        serde_json::from_slice(&body[..header_len]).map_err(|e| Error::Header(format!("weights header: {e}")))?;
    Ok((header, 12 + header_len))
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Sae<T>> {
    let (header, start) = read_weights_header(bytes)?;
    let config = header.config;
    config.validate()?;
    let (m, n) = (config.m, config.n);
    let width = header.dtype.byte_width();

    let mut payload = &bytes[start..];
    let expected: usize = header
        .arrays
        .iter()
        .map(|a| a.shape.iter().product::<usize>() * width)
        .sum();
    if payload.len() < expected {
        return Err(Error::TruncatedPayload);
    }
    if payload.len() > expected {
        return Err(Error::TrailingBytes);
    }

    let mut enc_w = None;
    let mut enc_b = None;
    let mut dec_r = None;
    let mut dec_b = None;
    let mut jump = None;
    let mut btk = None;
    for a in &header.arrays {
        let len: usize = a.shape.iter().product();
        let (chunk, rest) = payload.split_at(len * width);
        payload = rest;
        let values: Vec<T> = chunk.chunks_exact(width).map(|c| read_as(header.dtype, c)).collect();
        let want: &[usize] = match a.name.as_str() {
            "enc_weights" | "dec_rows" => &[m, n],
            "enc_bias" | "jump_thresholds" => &[m],
            "dec_bias" => &[n],
            "batchtopk_threshold" => &[1],
            other => return Err(Error::Header(format!("unknown array {other:?}"))),
        };
        if a.shape != want {
            return Err(Error::Header(format!(
                "array {} has shape {:?}, expected {:?}",
                a.name, a.shape, want
            )));
        }
        let dup = || Error::Header(format!("duplicate array {}", a.name));
        let to2 = |v: Vec<T>| Array2::from_shape_vec((m, n), v).map_err(|e| Error::Header(e.to_string()));
        match a.name.as_str() {
            "enc_weights" => enc_w.replace(to2(values)?).map_or(Ok(()), |_| Err(dup()))?,
            "dec_rows" => dec_r.replace(to2(values)?).map_or(Ok(()), |_| Err(dup()))?,
            "enc_bias" => enc_b.replace(Array1::from(values)).map_or(Ok(()), |_| Err(dup()))?,
            "dec_bias" => dec_b.replace(Array1::from(values)).map_or(Ok(()), |_| Err(dup()))?,
            "jump_thresholds" => jump.replace(Array1::from(values)).map_or(Ok(()), |_| Err(dup()))?,
            _ => btk.replace(values[0]).map_or(Ok(()), |_| Err(dup()))?,
        }
    }
    let missing = |name: &str| Error::Header(format!("missing array {name}"));
    let mut sae = Sae::from_parts(
        config,
        enc_w.ok_or_else(|| missing("enc_weights"))?,
        enc_b.ok_or_else(|| missing("enc_bias"))?,
        dec_r.ok_or_else(|| missing("dec_rows"))?,
        dec_b.ok_or_else(|| missing("dec_bias"))?,
    )?;
    sae.jump_thresholds = jump;
    sae.batchtopk_threshold = btk;
    sae.validate()?;
    Ok(sae)
}

/// Writes `sae` in its native precision.
pub fn save_checkpoint<T: Scalar>(sae: &Sae<T>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(sae, T::DTYPE)?)
}

pub fn save_checkpoint_as<T: Scalar>(sae: &Sae<T>, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    write_atomic(path, &encode_checkpoint(sae, dtype)?)
}

/// Loads a checkpoint of either stored precision, converting to `T`.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Sae<T>> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::Variant;

    fn sample() -> Sae<f64> {
        let mut sae = Sae::init(SaeConfig::new(Variant::BatchTopK, 4, 3).with_k(2).with_seed(3)).unwrap();
        sae.enc_bias = ndarray::array![0.1, -0.2, 1.0 / 3.0];
        sae.batchtopk_threshold = Some(0.123456789);
        sae
    }

    #[test]
    fn native_round_trip_is_bitwise() {
        let sae = sample();
        let back: Sae<f64> = decode_checkpoint(&encode_checkpoint(&sae, Dtype::F64).unwrap()).unwrap();
        assert_eq!(back, sae);
        let s32 = sae.cast::<f32>();
        let back32: Sae<f32> = decode_checkpoint(&encode_checkpoint(&s32, Dtype::F32).unwrap()).unwrap();
        assert_eq!(back32, s32);
    }

    #[test]
    fn truncated_and_corrupt_files() {
        let bytes = encode_checkpoint(&sample(), Dtype::F32).unwrap();
        let err = decode_checkpoint::<f64>(&bytes[..bytes.len() - 1]).unwrap_err();
        assert_eq!(err.to_string(), "truncated payload");
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(decode_checkpoint::<f64>(&bad), Err(Error::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            decode_checkpoint::<f64>(&bad),
            Err(Error::UnsupportedVersion(2))
        ));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_checkpoint::<f64>(&long), Err(Error::TrailingBytes)));
    }

    #[test]
    fn jump_thresholds_required_for_jump_variant() {
        let mut sae = sample();
        sae.config.variant = Variant::JumpReluInference;
        assert!(encode_checkpoint(&sae, Dtype::F32).is_err());
        sae.jump_thresholds = Some(ndarray::array![0.1, 0.2, 0.3]);
        let back: Sae<f64> = decode_checkpoint(&encode_checkpoint(&sae, Dtype::F64).unwrap()).unwrap();
        assert_eq!(back, sae);
    }
}
