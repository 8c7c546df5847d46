//! Binary tensor files.
//!
//! Layout: magic `MWTN`, version byte `0x01`, dtype byte (`0x01` = f32), two
//! reserved zero bytes, then `H`, `W`, `C` as little-endian `u32`, followed
//! by `H*W*C` little-endian `f32` values in row-major channel-last order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DisplacementField, FeatureMap};

pub const MAGIC: [u8; 4] = *b"MWTN";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F32: u8 = 0x01;
pub const HEADER_LEN: usize = 20;

pub fn encode(map: &FeatureMap<f32>) -> Vec<u8> {
    let (h, w, c) = map.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + map.data().len() * 4);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.extend_from_slice(&[0, 0]);
    for d in [h, w, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in map.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<FeatureMap<f32>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes[4] != VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(bytes[5]));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let payload = (h as usize)
        .checked_mul(w as usize)
        .and_then(|n| n.checked_mul(c as usize))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or(Error::DimOverflow { h, w, c })?;
    if bytes.len() < payload {
        return Err(Error::Truncated {
            expected: payload,
            found: bytes.len(),
        });
    }
    if bytes.len() > payload {
        return Err(Error::TrailingBytes(bytes.len() - payload));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    FeatureMap::new(h as usize, w as usize, c as usize, data)
}

pub fn write_tensor(path: impl AsRef<Path>, map: &FeatureMap<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(map)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<FeatureMap<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_field(path: impl AsRef<Path>, field: &DisplacementField<f32>) -> Result<()> {
    write_tensor(path, field.as_map())
}

pub fn read_field(path: impl AsRef<Path>) -> Result<DisplacementField<f32>> {
    DisplacementField::from_map(read_tensor(path)?)
}

/// Writes newline-delimited JSON records.
pub fn write_ndjson<S: serde::Serialize>(path: impl AsRef<Path>, records: &[S]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::parse(path, e))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_ndjson<D: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<D>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::parse(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let map = FeatureMap::new(1, 2, 3, (0..6).map(|v| v as f32).collect()).unwrap();
        let bytes = encode(&map);
        assert_eq!(&bytes[0..8], b"MWTN\x01\x01\x00\x00");
        assert_eq!(&bytes[8..20], &[1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(bytes.len(), HEADER_LEN + 24);
        assert_eq!(&bytes[24..28], &1.0f32.to_le_bytes());
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = encode(&FeatureMap::zeros(2, 2, 1));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::BadMagic(_))));
    }

    #[test]
    fn distinct_header_errors() {
        let good = encode(&FeatureMap::zeros(2, 2, 1));
        let mut v = good.clone();
        v[4] = 2;
        assert!(matches!(decode(&v), Err(Error::UnsupportedVersion(2))));
        let mut v = good.clone();
        v[5] = 9;
        assert!(matches!(decode(&v), Err(Error::UnsupportedDtype(9))));
        let mut v = good.clone();
        v[8..20].copy_from_slice(&[0xff; 12]);
        let err = decode(&v).unwrap_err();
        assert!(
            matches!(err, Error::DimOverflow { .. } | Error::Truncated { .. }),
            "{err:?}"
        );
        assert!(matches!(decode(&good[..good.len() - 1]), Err(Error::Truncated { .. })));
        assert!(matches!(decode(&good[..10]), Err(Error::Truncated { .. })));
        let mut v = good;
        v.push(0);
        assert!(matches!(decode(&v), Err(Error::TrailingBytes(1))));
    }

    #[test]
    fn header_dims_disagree_with_size() {
        let mut bytes = encode(&FeatureMap::zeros(2, 2, 1));
        bytes[8] = 3;
        assert!(matches!(
            decode(&bytes),
            Err(Error::Truncated {
                expected: 44,
                found: 36
            })
        ));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(h in 0usize..5, w in 0usize..5, c in 0usize..4, seed in any::<u32>()) {
            let map = FeatureMap::from_fn(h, w, c, |y, x, k| {
                f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add((y * 97 + x * 13 + k) as u32) & 0x7f7f_ffff)
            });
            let bytes = encode(&map);
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(encode(&back), bytes);
            prop_assert_eq!(back.shape(), map.shape());
        }
    }
}
