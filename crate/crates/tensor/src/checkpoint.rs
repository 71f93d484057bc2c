//! Parameter checkpoint files (`SMFW`).
//!
//! Layout, little-endian: magic `SMFW`, version `u32`, count `u32`, then per
//! parameter: name length `u16`, UTF-8 name, rank `u8`, dims `u32 × rank`,
//! values `f64 × Π dims`.

use std::path::Path;

use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::wire::{ByteReader, ByteWriter, FormatError};

pub const MAGIC: &[u8; 4] = b"SMFW";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC).u32(VERSION).u32(store.len() as u32);
    for (_, name, t) in store.iter() {
        w.u16(name.len() as u16).bytes(name.as_bytes());
        w.u8(t.rank() as u8);
        for &d in t.shape() {
            w.u32(d as u32);
        }
        for &v in t.data() {
            w.f64(v);
        }
    }
    w.into_bytes()
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore, FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_at = r.offset();
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|e| FormatError::Invalid {
            offset: name_at,
            field: "parameter name",
            reason: e.to_string(),
        })?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let values_at = r.offset();
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| FormatError::Truncated {
                offset: values_at,
                needed: shape.iter().fold(8usize, |a, &d| a.saturating_mul(d)),
                available: r.remaining(),
            })?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f64()?);
        }
        let t = Tensor::new(shape, data).expect("length matches shape");
        store.add(name, t).map_err(|e| FormatError::Invalid {
            offset: name_at,
            field: "parameter name",
            reason: e.to_string(),
        })?;
    }
    r.finish()?;
    Ok(store)
}

pub fn save(store: &ParamStore, path: impl AsRef<Path>) -> Result<(), FormatError> {
    std::fs::write(path, encode(store))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore, FormatError> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.add(
            "conv.weight",
            Tensor::new(vec![2, 1, 3, 3], (0..18).map(|v| v as f64 * 0.1 - 0.7).collect()).unwrap(),
        )
        .unwrap();
        s.add("head.bias", Tensor::from_vec(vec![-2.19, f64::MIN_POSITIVE]))
            .unwrap();
        s.add("scalar", Tensor::scalar(1.0 / 3.0)).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let bytes = encode(&s);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn every_truncation_is_an_error() {
        let bytes = encode(&sample());
        for cut in 0..bytes.len() {
            let err = decode(&bytes[..cut]).unwrap_err();
            assert!(err.offset().is_some(), "cut {cut}: {err}");
        }
    }
}
