use rand::seq::SliceRandom;

use super::{Result, TrainerError};
use crate::rng;
use crate::volume::Region;

/// Region-balanced draw order over a fixed list of volumes.
///
/// Draw `i` picks region `i mod R` (regions sorted) and walks that region's
/// volumes in an order reshuffled every pass. The draw sequence is a pure
/// function of `(regions, seed, i)`, so resuming at any index needs no
/// saved state.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    groups: Vec<(Region, Vec<usize>)>,
    seed: u64,
}

impl BalancedSampler {
    /// `regions[j]` is the region of volume `j`.
    pub fn new(regions: &[Region], seed: u64) -> Result<Self> {
        if regions.is_empty() {
            return Err(TrainerError::EmptyDataset);
        }
        let mut groups: Vec<(Region, Vec<usize>)> = Vec::new();
        for (j, &r) in regions.iter().enumerate() {
            match groups.iter_mut().find(|(g, _)| *g == r) {
                Some((_, members)) => members.push(j),
                None => groups.push((r, vec![j])),
            }
        }
        groups.sort_by_key(|(r, _)| *r);
        Ok(Self { groups, seed })
    }

    pub fn regions(&self) -> Vec<Region> {
        self.groups.iter().map(|(r, _)| *r).collect()
    }

    /// Volume index of draw `i`.
    pub fn draw(&self, i: u64) -> usize {
        let r = (i % self.groups.len() as u64) as usize;
        let t = i / self.groups.len() as u64;
        let members = &self.groups[r].1;
        let m = members.len() as u64;
        let (pass, pos) = (t / m, (t % m) as usize);
        let mut order = members.clone();
        let mut g = rng::stream(self.seed ^ pass.rotate_left(17), rng::domain::SAMPLER | r as u64);
        order.shuffle(&mut g);
        order[pos]
    }

    /// Draws `size` volumes for batch `step`.
    pub fn batch(&self, step: u64, size: usize) -> Vec<usize> {
        let start = step * size as u64;
        (start..start + size as u64).map(|i| self.draw(i)).collect()
    }
}
