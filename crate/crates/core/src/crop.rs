//! Base-crop grids, random crops and overlap-proportion position labels.
//!
//! The grid is two-dimensional in the axial (x–y) plane: `rows × cols`
//! cells of identical size that share one z-range. Cells are numbered
//! row-major, row along y, column along x. A random crop has the cell size
//! and the grid's z-range, so its label vector (the fraction of its voxels
//! inside each cell) sums to one whenever it lies inside the grid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CropError {
    #[error("grid footprint {footprint:?} does not fit inside volume dims {dims:?}")]
    GridDoesNotFit { footprint: [usize; 3], dims: [usize; 3] },
    #[error("crop {0:?} does not intersect the grid footprint")]
    CropOutsideGrid(CropBox),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

/// Axis-aligned voxel box `[origin, origin + size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropBox {
    pub origin: [usize; 3],
    pub size: [usize; 3],
}

impl CropBox {
    pub fn new(origin: [usize; 3], size: [usize; 3]) -> Self {
        Self { origin, size }
    }

    pub fn end(&self) -> [usize; 3] {
        [self.origin[0] + self.size[0], self.origin[1] + self.size[1], self.origin[2] + self.size[2]]
    }

    pub fn voxel_count(&self) -> u64 {
        self.size.iter().map(|&s| s as u64).product()
    }

    /// Per-axis overlap lengths with `other`.
    pub fn overlap_extent(&self, other: &CropBox) -> [usize; 3] {
        let (a, b) = (self.end(), other.end());
        std::array::from_fn(|i| a[i].min(b[i]).saturating_sub(self.origin[i].max(other.origin[i])))
    }

    pub fn intersection_voxels(&self, other: &CropBox) -> u64 {
        self.overlap_extent(other).iter().map(|&s| s as u64).product()
    }

    pub fn intersects(&self, other: &CropBox) -> bool {
        self.intersection_voxels(other) > 0
    }

    pub fn contains(&self, other: &CropBox) -> bool {
        let (a, b) = (self.end(), other.end());
        (0..3).all(|i| other.origin[i] >= self.origin[i] && b[i] <= a[i])
    }

    pub fn fits_in(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|i| self.end()[i] <= dims[i])
    }
}

/// Non-overlapping base crops tiling a contiguous in-plane footprint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseGrid {
    cells: Vec<CropBox>,
    grid_shape: (usize, usize),
    cell_size: [usize; 3],
    depth_extent: CropBox,
}

impl BaseGrid {
    pub fn cells(&self) -> &[CropBox] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// `(rows, cols)`.
    pub fn grid_shape(&self) -> (usize, usize) {
        self.grid_shape
    }

    pub fn cell_size(&self) -> [usize; 3] {
        self.cell_size
    }

    /// The whole footprint, including the shared z-range.
    pub fn depth_extent(&self) -> CropBox {
        self.depth_extent
    }

    pub fn footprint(&self) -> CropBox {
        self.depth_extent
    }

    pub fn cell_index(&self, row: usize, col: usize) -> usize {
        row * self.grid_shape.1 + col
    }
}

/// Lays out `rows × cols` cells from the in-plane origin. The shared z-range
/// is centred in the volume.
pub fn build_base_grid(volume_dims: [usize; 3], grid_shape: (usize, usize), cell_size: [usize; 3]) -> Result<BaseGrid, CropError> {
    let (rows, cols) = grid_shape;
    if rows == 0 || cols == 0 || cell_size.contains(&0) {
        return Err(CropError::InvalidGrid(format!("grid {rows}x{cols} with cell {cell_size:?} is empty")));
    }
    let footprint = [cols * cell_size[0], rows * cell_size[1], cell_size[2]];
    if (0..3).any(|a| footprint[a] > volume_dims[a]) {
        return Err(CropError::GridDoesNotFit { footprint, dims: volume_dims });
    }
    let z0 = (volume_dims[2] - cell_size[2]) / 2;
    let cells = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .map(|(r, c)| CropBox::new([c * cell_size[0], r * cell_size[1], z0], cell_size))
        .collect();
    Ok(BaseGrid { cells, grid_shape, cell_size, depth_extent: CropBox::new([0, 0, z0], footprint) })
}

/// Cell-sized crop at a uniformly random in-plane position inside the grid
/// footprint.
pub fn sample_random_crop<R: rand::Rng + ?Sized>(grid: &BaseGrid, rng: &mut R) -> CropBox {
    let fp = grid.footprint();
    let cs = grid.cell_size;
    let x = rng.gen_range(0..=fp.size[0] - cs[0]);
    let y = rng.gen_range(0..=fp.size[1] - cs[1]);
    CropBox::new([fp.origin[0] + x, fp.origin[1] + y, fp.origin[2]], cs)
}

/// Overlap proportions of one random crop with every base crop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionLabelSet {
    pub values: Vec<f64>,
    pub crop: CropBox,
}

impl PositionLabelSet {
    /// Index of the largest label, lowest index on ties.
    pub fn dominant(&self) -> usize {
        argmax(&self.values)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Whether the top-scoring cell carries the largest label. Ties in the
/// labels count any of the tied cells as correct.
pub fn top1_hit(scores: &[f64], labels: &[f64]) -> bool {
    let best = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    labels[argmax(scores)] == best
}

/// `values[i] = |k ∩ q_i| / |k|` in voxel counts.
///
/// A crop that only partly overlaps the footprint gets labels summing to
/// less than one; a crop with no overlap at all is an error.
pub fn position_labels(k: &CropBox, grid: &BaseGrid) -> Result<PositionLabelSet, CropError> {
    if !k.intersects(&grid.footprint()) {
        return Err(CropError::CropOutsideGrid(*k));
    }
    let total = k.voxel_count() as f64;
    let values = grid.cells.iter().map(|q| k.intersection_voxels(q) as f64 / total).collect();
    Ok(PositionLabelSet { values, crop: *k })
}
