//! Binary volume format.
//!
//! All integers and floats are little-endian.
//!
//! | offset | size  | field                                   |
//! |--------|-------|-----------------------------------------|
//! | 0      | 8     | magic `VOCOVOL\0`                       |
//! | 8      | 4     | format version (u32, currently 1)       |
//! | 12     | 4     | flags (u32, bit 0: label block present) |
//! | 16     | 4     | region code (u32)                       |
//! | 20     | 12    | reserved, zero                          |
//! | 32     | 12    | dims x, y, z (u32 each)                 |
//! | 44     | 24    | spacing x, y, z (f64 each)              |
//! | 68     | 4·N   | intensities (f32), z-outermost          |
//! | ...    | 2·N   | labels (u16), only when flagged         |

use std::fs;
use std::path::Path;

use super::{Region, Result, Volume, VolumeError};

pub const MAGIC: [u8; 8] = *b"VOCOVOL\0";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;
const FLAG_LABELS: u32 = 1;
const GEOMETRY_LEN: usize = 12 + 24;

pub fn encode(v: &Volume) -> Vec<u8> {
    let n = v.voxel_count();
    let mut out = Vec::with_capacity(HEADER_LEN + GEOMETRY_LEN + n * 6);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let flags = if v.labels().is_some() { FLAG_LABELS } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&v.region().code().to_le_bytes());
    out.extend_from_slice(&[0u8; 12]);
    for d in v.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in v.spacing() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(labels) = v.labels() {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    out
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

pub fn decode(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_LEN {
        return Err(VolumeError::MalformedHeader(format!("file is {} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    if bytes[..8] != MAGIC {
        return Err(VolumeError::MalformedHeader("bad magic".into()));
    }
    let version = u32_at(bytes, 8);
    if version != VERSION {
        return Err(VolumeError::MalformedHeader(format!("unsupported version {version}")));
    }
    let flags = u32_at(bytes, 12);
    if flags & !FLAG_LABELS != 0 {
        return Err(VolumeError::MalformedHeader(format!("unknown flags {flags:#x}")));
    }
    let region = Region::from_code(u32_at(bytes, 16))
        .ok_or_else(|| VolumeError::MalformedHeader(format!("unknown region {}", u32_at(bytes, 16))))?;
    if bytes[20..32].iter().any(|&b| b != 0) {
        return Err(VolumeError::MalformedHeader("reserved bytes not zero".into()));
    }
    if bytes.len() < HEADER_LEN + GEOMETRY_LEN {
        return Err(VolumeError::TruncatedPayload { expected: HEADER_LEN + GEOMETRY_LEN, found: bytes.len() });
    }
    let dims = [u32_at(bytes, 32) as usize, u32_at(bytes, 36) as usize, u32_at(bytes, 40) as usize];
    if dims.contains(&0) {
        return Err(VolumeError::DimsMismatch(format!("zero extent in {dims:?}")));
    }
    let mut spacing = [0.0f64; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let at = 44 + 8 * a;
        *s = f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| VolumeError::DimsMismatch(format!("voxel count overflows for {dims:?}")))?;
    let has_labels = flags & FLAG_LABELS != 0;
    let payload = &bytes[HEADER_LEN + GEOMETRY_LEN..];
    let expected = n * 4 + if has_labels { n * 2 } else { 0 };
    if payload.len() < expected {
        return Err(VolumeError::TruncatedPayload { expected, found: payload.len() });
    }
    if payload.len() > expected {
        return Err(VolumeError::DimsMismatch(format!("payload has {} bytes, dims {dims:?} imply {expected}", payload.len())));
    }
    let data = payload[..n * 4].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let labels = has_labels.then(|| payload[n * 4..].chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().unwrap())).collect());
    Volume::new(dims, spacing, data, region, labels).map_err(|e| VolumeError::DimsMismatch(e.to_string()))
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(v))?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(labels: bool) -> Volume {
        let data: Vec<f32> = (0..60).map(|i| i as f32 * 0.25 - 3.0).collect();
        let l = labels.then(|| (0..60).map(|i| (i % 5) as u16).collect());
        Volume::new([3, 4, 5], [0.5, 1.0, 2.5], data, Region::Abdomen, l).unwrap()
    }

    #[test]
    fn round_trip_with_and_without_labels() {
        for labels in [false, true] {
            let v = sample(labels);
            assert_eq!(decode(&encode(&v)).unwrap(), v);
        }
    }

    #[test]
    fn corrupted_magic_is_malformed_header() {
        let mut b = encode(&sample(false));
        b[0] ^= 0xff;
        assert!(matches!(decode(&b), Err(VolumeError::MalformedHeader(_))));
    }

    #[test]
    fn short_payload_is_truncated() {
        let b = encode(&sample(true));
        let cut = &b[..b.len() - 3];
        assert!(matches!(decode(cut), Err(VolumeError::TruncatedPayload { .. })));
        let b = encode(&sample(false));
        assert!(matches!(decode(&b[..HEADER_LEN + 20]), Err(VolumeError::TruncatedPayload { .. })));
    }

    #[test]
    fn trailing_bytes_and_zero_dims_are_dims_mismatch() {
        let mut b = encode(&sample(false));
        b.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(decode(&b), Err(VolumeError::DimsMismatch(_))));
        let mut b = encode(&sample(false));
        b[32..36].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode(&b), Err(VolumeError::DimsMismatch(_))));
    }

    #[test]
    fn header_is_thirty_two_bytes_then_geometry() {
        let b = encode(&sample(false));
        assert_eq!(&b[..8], &MAGIC);
        assert_eq!(u32_at(&b, 32), 3);
        assert_eq!(b.len(), HEADER_LEN + GEOMETRY_LEN + 60 * 4);
    }
}
