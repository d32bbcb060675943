//! Position-prediction benchmark and downstream transfer probes.

mod probe;

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::crop::{self, build_base_grid, position_labels, sample_random_crop, BaseGrid, CropBox, CropError};
use crate::losses::similarity_rows;
use crate::model::{crop_batch, ModelError, VocoModel};
use crate::omni::OmniError;
use crate::real::Real;
use crate::rng;
use crate::volume::Volume;

pub use probe::{probe_transfer, read_transfer_report, InitMode, ProbeArm, ProbeConfig, ProbeTask, TransferReport};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no volumes to evaluate")]
    EmptyDataset,
    #[error("unknown probe task `{0}`")]
    UnknownTask(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Crop(#[from] CropError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error(transparent)]
    Omni(#[from] OmniError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Anything that scores a random crop against the base crops of its
/// volume.
pub trait PositionScorer: Sync {
    fn scores(&self, volume: &Volume, k: &CropBox, grid: &BaseGrid) -> Result<Vec<f64>>;
}

impl<T: Real> PositionScorer for VocoModel<T> {
    /// Cosine similarities between the student projection of `k` and the
    /// teacher projections of the base crops.
    fn scores(&self, volume: &Volume, k: &CropBox, grid: &BaseGrid) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let mut crops = vec![volume.extract(k.origin, k.size)];
        crops.extend(grid.cells().iter().map(|q| volume.extract(q.origin, q.size)));
        let refs: Vec<&[f32]> = crops.iter().map(Vec::as_slice).collect();
        let x = crop_batch(&mut tape, &refs, k.size)?;
        let feats = bound.encoder.forward(&mut tape, x)?.features;
        let c = self.feature_dim();
        let n = grid.len();
        let kf = tape.slice(feats, 0, vec![1, c]).map_err(ModelError::from)?;
        let qf = tape.slice(feats, c, vec![n, c]).map_err(ModelError::from)?;
        let (ks, qt) = crate::model::project_pair(&mut tape, &bound, kf, qf)?;
        let s = similarity_rows(&mut tape, ks, qt)?;
        Ok(tape.value(s).data().iter().map(|v| v.as_f64()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub crops: usize,
    pub seed: u64,
    pub grid_shape: [usize; 2],
    pub cell_size: [usize; 3],
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { crops: 1000, seed: 0, grid_shape: [4, 4], cell_size: [16, 16, 16] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionEvalReport {
    pub crops: usize,
    pub cells: usize,
    /// Fraction of crops whose top-scoring cell carries the largest label.
    pub top1: f64,
    /// Mean over crops of `(1/n) Σ |s_i − y_i|`.
    pub mean_abs_error: f64,
    /// `confusion[true][predicted]` over dominant cells.
    pub confusion: Vec<Vec<u64>>,
    /// Top-1 of the same scores against randomly permuted labels.
    pub shuffled_top1: f64,
}

impl PositionEvalReport {
    /// Binomial three-sigma band around chance `1/n` for this crop count.
    pub fn chance_band(&self) -> (f64, f64) {
        let p = 1.0 / self.cells as f64;
        let sd = (p * (1.0 - p) / self.crops as f64).sqrt();
        (p - 3.0 * sd, p + 3.0 * sd)
    }

    pub fn to_text(&self) -> String {
        let (lo, hi) = self.chance_band();
        let mut s = String::new();
        let _ = writeln!(s, "crops            {}", self.crops);
        let _ = writeln!(s, "top-1 accuracy   {:.4}", self.top1);
        let _ = writeln!(s, "mean |s - y|     {:.4}", self.mean_abs_error);
        let _ = writeln!(s, "shuffled top-1   {:.4}", self.shuffled_top1);
        let _ = writeln!(s, "chance band      [{lo:.4}, {hi:.4}]");
        s
    }

    /// Confusion counts as CSV, one row per true cell.
    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("true");
        for j in 0..self.cells {
            let _ = write!(s, ",pred{j}");
        }
        s.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            let cols: Vec<String> = row.iter().map(u64::to_string).collect();
            let _ = writeln!(s, "{i},{}", cols.join(","));
        }
        s
    }
}

struct CropOutcome {
    truth: usize,
    predicted: usize,
    hit: bool,
    abs_error: f64,
    shuffled_hit: bool,
}

/// Scores `cfg.crops` random crops, crop `i` taken from volume
/// `i mod len` with its own RNG stream, so results do not depend on thread
/// scheduling.
pub fn eval_position(scorer: &impl PositionScorer, volumes: &[Arc<Volume>], cfg: &EvalConfig) -> Result<PositionEvalReport> {
    if volumes.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let shape = (cfg.grid_shape[0], cfg.grid_shape[1]);
    let outcomes = (0..cfg.crops)
        .into_par_iter()
        .map(|i| {
            let v = &volumes[i % volumes.len()];
            let grid = build_base_grid(v.dims(), shape, cfg.cell_size)?;
            let mut g = rng::stream(cfg.seed, rng::domain::EVAL | i as u64);
            let k = sample_random_crop(&grid, &mut g);
            let y = position_labels(&k, &grid)?.values;
            let s = scorer.scores(v, &k, &grid)?;
            let mut perm = y.clone();
            perm.shuffle(&mut g);
            let abs_error = s.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64;
            Ok(CropOutcome {
                truth: crop::argmax(&y),
                predicted: crop::argmax(&s),
                hit: crop::top1_hit(&s, &y),
                abs_error,
                shuffled_hit: crop::top1_hit(&s, &perm),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cells = shape.0 * shape.1;
    let mut confusion = vec![vec![0u64; cells]; cells];
    let (mut hits, mut shuffled, mut err) = (0usize, 0usize, 0.0);
    for o in &outcomes {
        confusion[o.truth][o.predicted] += 1;
        hits += usize::from(o.hit);
        shuffled += usize::from(o.shuffled_hit);
        err += o.abs_error;
    }
    let n = outcomes.len().max(1) as f64;
    Ok(PositionEvalReport {
        crops: outcomes.len(),
        cells,
        top1: hits as f64 / n,
        mean_abs_error: err / n,
        confusion,
        shuffled_top1: shuffled as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{generate_phantom, PhantomSpec, Region};

    struct Oracle;

    impl PositionScorer for Oracle {
        fn scores(&self, _: &Volume, k: &CropBox, grid: &BaseGrid) -> Result<Vec<f64>> {
            let y = position_labels(k, grid)?;
            let mut s = vec![0.0; grid.len()];
            s[y.dominant()] = 1.0;
            Ok(s)
        }
    }

    fn vols() -> Vec<Arc<Volume>> {
        let spec = PhantomSpec::standard(Region::Chest, [32, 32, 16], 2);
        (0..2).map(|i| Arc::new(generate_phantom(&spec, i).unwrap())).collect()
    }

    fn cfg() -> EvalConfig {
        EvalConfig { crops: 200, seed: 4, grid_shape: [4, 4], cell_size: [8, 8, 8] }
    }

    #[test]
    fn oracle_scores_perfectly() {
        let r = eval_position(&Oracle, &vols(), &cfg()).unwrap();
        assert_eq!(r.top1, 1.0);
        assert_eq!(r.confusion.iter().flatten().sum::<u64>(), 200);
        for (i, row) in r.confusion.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                assert!(i == j || c == 0);
            }
        }
    }

    #[test]
    fn report_is_deterministic() {
        let a = eval_position(&Oracle, &vols(), &cfg()).unwrap();
        let b = eval_position(&Oracle, &vols(), &cfg()).unwrap();
        assert_eq!(a, b);
        let back: PositionEvalReport = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
        assert_eq!(back, a);
    }
}
