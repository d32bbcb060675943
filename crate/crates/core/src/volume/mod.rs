//! Dense volumes, synthetic phantoms and the on-disk volume format.

mod io;
mod manifest;
mod phantom;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{read_volume, write_volume, HEADER_LEN, MAGIC, VERSION};
pub use manifest::{read_manifest, write_manifest, Dataset, DatasetEntry, ManifestRecord, Split};
pub use phantom::{generate_phantom, OrganSpec, PhantomSpec};

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("organs {a} and {b} overlap at voxel {voxel:?}")]
    OrganCollision { a: u16, b: u16, voxel: [usize; 3] },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("dims mismatch: {0}")]
    DimsMismatch(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("evaluation volume `{0}` requested by a training stage")]
    EvalLeak(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

/// Anatomical region a volume was acquired from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Region {
    Abdomen,
    Chest,
    Head,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Abdomen, Region::Chest, Region::Head];

    pub fn code(self) -> u32 {
        match self {
            Region::Abdomen => 0,
            Region::Chest => 1,
            Region::Head => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Region::Abdomen => "ABDOMEN",
            Region::Chest => "CHEST",
            Region::Head => "HEAD",
        })
    }
}

/// A dense scalar grid, row-major with z outermost and x innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
    region: Region,
    labels: Option<Vec<u16>>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>, region: Region, labels: Option<Vec<u16>>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(VolumeError::Invalid(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VolumeError::Invalid(format!("spacing must be finite and positive, got {spacing:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(VolumeError::Invalid(format!("data has {} voxels, dims imply {n}", data.len())));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(VolumeError::Invalid(format!("label grid has {} voxels, dims imply {n}", l.len())));
            }
        }
        Ok(Self { dims, spacing, data, region, labels })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn region(&self) -> Region {
        self.region
    }

    pub fn labels(&self) -> Option<&[u16]> {
        self.labels.as_deref()
    }

    pub fn voxel_count(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Returns a copy with the label grid dropped.
    pub fn without_labels(&self) -> Volume {
        Volume { labels: None, ..self.clone() }
    }

    /// Returns a copy carrying `labels` in place of any existing grid.
    pub fn with_labels(&self, labels: Vec<u16>) -> Result<Volume> {
        Volume::new(self.dims, self.spacing, self.data.clone(), self.region, Some(labels))
    }

    /// Copies the box `[origin, origin + size)` out of the intensity grid.
    /// Panics if the box leaves the volume.
    pub fn extract(&self, origin: [usize; 3], size: [usize; 3]) -> Vec<f32> {
        assert!((0..3).all(|a| origin[a] + size[a] <= self.dims[a]), "box {origin:?}+{size:?} exceeds {:?}", self.dims);
        let mut out = Vec::with_capacity(size[0] * size[1] * size[2]);
        for z in origin[2]..origin[2] + size[2] {
            for y in origin[1]..origin[1] + size[1] {
                let start = self.index(origin[0], y, z);
                out.extend_from_slice(&self.data[start..start + size[0]]);
            }
        }
        out
    }

    /// Same as [`Volume::extract`] for the label grid.
    pub fn extract_labels(&self, origin: [usize; 3], size: [usize; 3]) -> Option<Vec<u16>> {
        let labels = self.labels.as_ref()?;
        let mut out = Vec::with_capacity(size[0] * size[1] * size[2]);
        for z in origin[2]..origin[2] + size[2] {
            for y in origin[1]..origin[1] + size[1] {
                let start = self.index(origin[0], y, z);
                out.extend_from_slice(&labels[start..start + size[0]]);
            }
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_lengths() {
        assert!(Volume::new([2, 2, 2], [1.0; 3], vec![0.0; 7], Region::Head, None).is_err());
        assert!(Volume::new([2, 2, 2], [1.0; 3], vec![0.0; 8], Region::Head, Some(vec![0; 4])).is_err());
        assert!(Volume::new([2, 2, 2], [0.0, 1.0, 1.0], vec![0.0; 8], Region::Head, None).is_err());
    }

    #[test]
    fn extract_follows_z_outermost_layout() {
        let data: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let v = Volume::new([2, 3, 4], [1.0; 3], data, Region::Chest, None).unwrap();
        assert_eq!(v.get(1, 2, 3), 23.0);
        assert_eq!(v.extract([1, 1, 2], [1, 2, 1]), vec![15.0, 17.0]);
    }
}
