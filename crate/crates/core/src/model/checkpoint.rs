//! Checkpoint container: JSON metadata plus named parameter blobs.
//!
//! Layout (little-endian): magic `VOCOCKPT`, u32 format version, u32
//! element width (4 = f32, 8 = f64), u32 metadata length and the UTF-8
//! JSON metadata, u32 tensor count, then per tensor: u32 name length, name
//! bytes, u32 rank, u32 per dimension, raw values.

use std::fs;
use std::path::Path;

use serde_json::Value;

use super::{ModelError, Result};
use crate::autodiff::Tensor;
use crate::real::Real;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"VOCOCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointFile<T> {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

pub fn encode<T: Real>(meta: &Value, tensors: &[(String, &Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
    let meta = serde_json::to_vec(meta).expect("json value serializes");
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(ModelError::IncompatibleCheckpoint(format!("truncated at byte {} (need {n} more)", self.at)));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<CheckpointFile<T>> {
    let bad = |m: String| ModelError::IncompatibleCheckpoint(m);
    let mut r = Reader { bytes, at: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("format version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let width = r.u32()? as usize;
    if width != T::BYTES {
        return Err(bad(format!("stored {}-byte floats, run uses {}-byte floats", width, T::BYTES)));
    }
    let meta_len = r.u32()? as usize;
    let meta: Value = serde_json::from_slice(r.take(meta_len)?).map_err(|e| bad(format!("metadata: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| bad(e.to_string()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * width)?;
        let data = raw.chunks_exact(width).map(T::read_le).collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
        tensors.push((name, t));
    }
    if r.at != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(CheckpointFile { meta, tensors })
}

pub fn write_checkpoint<T: Real>(path: impl AsRef<Path>, meta: &Value, tensors: &[(String, &Tensor<T>)]) -> Result<()> {
    fs::write(path, encode(meta, tensors))?;
    Ok(())
}

pub fn read_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<CheckpointFile<T>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let a = Tensor::<f32>::new(vec![2, 3], vec![0.1, -2.5, 3.75, f32::MIN_POSITIVE, 1e-30, -0.0]).unwrap();
        let b = Tensor::<f32>::vector(vec![7.0]);
        let meta = serde_json::json!({"step": 3});
        let bytes = encode(&meta, &[("a".into(), &a), ("b".into(), &b)]);
        let back: CheckpointFile<f32> = decode(&bytes).unwrap();
        assert_eq!(back.meta, meta);
        assert_eq!(
            back.tensors[0].1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back.tensors[1], ("b".to_string(), b));
    }

    #[test]
    fn truncation_and_width_mismatch_are_incompatible() {
        let a = Tensor::<f64>::vector(vec![1.0, 2.0]);
        let bytes = encode(&Value::Null, &[("a".into(), &a)]);
        assert!(matches!(decode::<f64>(&bytes[..bytes.len() - 1]), Err(ModelError::IncompatibleCheckpoint(_))));
        assert!(matches!(decode::<f32>(&bytes), Err(ModelError::IncompatibleCheckpoint(_))));
    }
}
