//! Whole-volume inference, confidence-filtered pseudo labels and Dice.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{argmax_classes, OmniError, OmniModel, Result};
use crate::autodiff::{softmax_probs, Tape};
use crate::model::{crop_batch, ModelError, MIN_CROP};
use crate::real::Real;
use crate::volume::{Dataset, Volume};

/// Dense prediction for one volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<u16>,
    /// Mean over voxels of the winning class probability.
    pub confidence: f64,
}

pub trait Segmenter: Sync {
    fn predict(&self, volume: &Volume) -> Result<Prediction>;
}

/// Tile origins along one axis: a regular stride of `tile`, with the last
/// tile flush against the far edge.
fn tile_starts(extent: usize, tile: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..extent - tile + 1).step_by(tile).collect();
    if starts.last() != Some(&(extent - tile)) {
        starts.push(extent - tile);
    }
    starts
}

impl<T: Real> OmniModel<T> {
    /// Sliding-window prediction. Where tiles overlap, the later tile wins.
    pub fn predict(&self, volume: &Volume) -> Result<Prediction> {
        let dims = volume.dims();
        let tile = [0, 1, 2].map(|a| self.tile[a].min(dims[a]));
        if tile.iter().any(|&t| t < MIN_CROP) {
            return Err(ModelError::CropTooSmall(dims).into());
        }
        let k = self.head.classes();
        let n = volume.voxel_count();
        let mut labels = vec![0u16; n];
        let mut best = vec![0.0f64; n];
        for &z0 in &tile_starts(dims[2], tile[2]) {
            for &y0 in &tile_starts(dims[1], tile[1]) {
                for &x0 in &tile_starts(dims[0], tile[0]) {
                    let crop = volume.extract([x0, y0, z0], tile);
                    let mut tape = Tape::<T>::new();
                    let enc = self.model.encoder.bind(&mut tape, false);
                    let head = self.head.bind(&mut tape, false);
                    let x = crop_batch(&mut tape, &[&crop], tile)?;
                    let out = enc.forward(&mut tape, x)?;
                    let logits = head.forward(&mut tape, out.maps, tile)?;
                    let values = tape.value(logits).data();
                    let inner = tile.iter().product::<usize>();
                    let (probs, _) = softmax_probs(values, 1, k, inner, None);
                    let arg = argmax_classes(values, 1, k);
                    for z in 0..tile[2] {
                        for y in 0..tile[1] {
                            for x in 0..tile[0] {
                                let local = (z * tile[1] + y) * tile[0] + x;
                                let global = volume.index(x0 + x, y0 + y, z0 + z);
                                labels[global] = arg[local];
                                best[global] = probs[arg[local] as usize * inner + local].as_f64();
                            }
                        }
                    }
                }
            }
        }
        let confidence = best.iter().sum::<f64>() / n as f64;
        Ok(Prediction { labels, confidence })
    }
}

impl<T: Real> Segmenter for OmniModel<T> {
    fn predict(&self, volume: &Volume) -> Result<Prediction> {
        OmniModel::predict(self, volume)
    }
}

/// Pseudo-label outcome for one unlabeled volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabeledSample {
    pub id: String,
    pub confidence: f64,
    pub accepted: bool,
    #[serde(skip)]
    pub labels: Vec<u16>,
}

/// Predicts every entry of `unlabeled` in parallel and marks a sample
/// accepted when its confidence is at least `threshold`. Rejections are
/// logged; the returned list keeps dataset order.
pub fn generate_pseudo_labels(segmenter: &impl Segmenter, unlabeled: &Dataset, threshold: f64) -> Result<Vec<PseudoLabeledSample>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(OmniError::InvalidConfig(format!("threshold {threshold} outside [0, 1]")));
    }
    let out: Vec<PseudoLabeledSample> = unlabeled
        .entries()
        .par_iter()
        .map(|e| {
            let p = segmenter.predict(&e.volume)?;
            Ok(PseudoLabeledSample { id: e.id.clone(), confidence: p.confidence, accepted: p.confidence >= threshold, labels: p.labels })
        })
        .collect::<Result<_>>()?;
    for s in out.iter().filter(|s| !s.accepted) {
        log::info!("pseudo label for `{}` rejected: confidence {:.4} < {threshold}", s.id, s.confidence);
    }
    if !out.is_empty() && out.iter().all(|s| !s.accepted) {
        log::warn!("no pseudo label reached confidence {threshold}");
    }
    Ok(out)
}

pub fn accepted(samples: &[PseudoLabeledSample]) -> impl Iterator<Item = &PseudoLabeledSample> {
    samples.iter().filter(|s| s.accepted)
}

/// Mean Dice over foreground classes `1..classes`. A class absent from
/// both grids scores 1.
pub fn dice(pred: &[u16], truth: &[u16], classes: usize) -> f64 {
    assert_eq!(pred.len(), truth.len());
    let mut inter = vec![0usize; classes];
    let mut p = vec![0usize; classes];
    let mut t = vec![0usize; classes];
    for (&a, &b) in pred.iter().zip(truth) {
        let (a, b) = (a as usize, b as usize);
        if a < classes {
            p[a] += 1;
        }
        if b < classes {
            t[b] += 1;
        }
        if a == b && a < classes {
            inter[a] += 1;
        }
    }
    let scores: Vec<f64> =
        (1..classes).map(|c| if p[c] + t[c] == 0 { 1.0 } else { 2.0 * inter[c] as f64 / (p[c] + t[c]) as f64 }).collect();
    scores.iter().sum::<f64>() / scores.len().max(1) as f64
}

/// Fraction of foreground truth voxels predicted with the right class, 1
/// when there is no foreground.
pub fn foreground_accuracy(pred: &[u16], truth: &[u16]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        if b != 0 {
            total += 1;
            hit += usize::from(a == b);
        }
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiles_cover_axis() {
        assert_eq!(tile_starts(32, 16), vec![0, 16]);
        assert_eq!(tile_starts(40, 16), vec![0, 16, 24]);
        assert_eq!(tile_starts(8, 8), vec![0]);
    }

    #[test]
    fn dice_oracle() {
        // class 1: pred {0,1}, truth {1,2} -> 2*1/4
        // class 2: pred {3}, truth {} -> 0
        let pred = [1, 1, 0, 2];
        let truth = [0, 1, 1, 0];
        assert!((dice(&pred, &truth, 3) - 0.25).abs() < 1e-12);
        assert_eq!(dice(&truth, &truth, 3), 1.0);
    }

    #[test]
    fn foreground_accuracy_ignores_background() {
        assert_eq!(foreground_accuracy(&[0, 1, 2], &[0, 1, 1]), 0.5);
        assert_eq!(foreground_accuracy(&[3, 3], &[0, 0]), 1.0);
    }

    #[test]
    fn threshold_out_of_range_is_rejected() {
        struct Never;
        impl Segmenter for Never {
            fn predict(&self, _: &Volume) -> Result<Prediction> {
                unreachable!()
            }
        }
        assert!(generate_pseudo_labels(&Never, &Dataset::new(), 1.5).is_err());
    }
}
