//! Self-supervised pre-training loop.
//!
//! Each step draws a region-balanced batch, and for every volume builds the
//! base-crop grid, samples one random crop and its position labels, encodes
//! all crops in a single pass, routes the random crop through the student
//! projector and the base crops through the teacher, and accumulates
//! `L_pred` and `L_reg`. Same-region volumes in the batch are paired
//! round-robin for `L_inter`. One SGD step on encoder and student follows,
//! then the EMA update of the teacher.

mod metrics;
mod sampler;

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::crop::{self, build_base_grid, position_labels, sample_random_crop, CropBox, CropError};
use crate::losses::{self, loss_inter, loss_pred, loss_reg, similarity_rows, InterPair, LossBreakdown, LossError, Route};
use crate::model::{crop_batch, read_checkpoint, sgd_step, write_checkpoint, ModelConfig, ModelError, VocoModel};
use crate::real::{Precision, Real};
use crate::rng::{self, Rng, RngState};
use crate::volume::{Region, Volume};

pub use metrics::{metrics_row, MetricsWriter, METRICS_HEADER};
pub use sampler::BalancedSampler;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error("no volumes to sample from")]
    EmptyDataset,
    #[error("non-finite loss in batch {batch}: {source}")]
    NonFiniteLoss { batch: String, source: LossError },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Crop(#[from] CropError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainerError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Base-crop grid as `[rows, cols]`.
    pub grid_shape: [usize; 2],
    /// Cell extent `[x, y, z]` in voxels.
    pub cell_size: [usize; 3],
    pub batch_volumes: usize,
    pub steps: u64,
    pub learning_rate: f64,
    /// EMA momentum.
    pub rho: f64,
    /// Feature dropout rate for the inter-volume augmentation.
    pub dropout_p: f64,
    pub seed: u64,
    pub precision: Precision,
    pub feature_dim: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            grid_shape: [4, 4],
            cell_size: [16, 16, 16],
            batch_volumes: 4,
            steps: 500,
            learning_rate: 1e-2,
            rho: 0.9,
            dropout_p: 0.1,
            seed: 0,
            precision: Precision::F32,
            feature_dim: 128,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainerError::InvalidConfig(m.into()));
        if self.grid_shape.contains(&0) || self.grid_shape[0] * self.grid_shape[1] < 2 {
            return bad("grid needs at least two cells");
        }
        if self.cell_size.iter().any(|&c| c < crate::model::MIN_CROP) {
            return bad("cell_size below the encoder minimum of 8");
        }
        if self.batch_volumes == 0 {
            return bad("batch_volumes must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p must lie in [0, 1)");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { feature_dim: self.feature_dim, init_seed: self.seed }
    }

    /// Fields a checkpoint must agree on to be loadable.
    pub fn layout(&self) -> serde_json::Value {
        serde_json::json!({
            "grid_shape": self.grid_shape,
            "cell_size": self.cell_size,
            "feature_dim": self.feature_dim,
            "precision": self.precision,
        })
    }
}

/// SHA-256 of the canonical JSON form of `value`, hex encoded.
pub fn config_hash(value: &impl Serialize) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(json))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStepRecord {
    pub step: u64,
    pub losses: LossBreakdown,
    pub wall_ms: f64,
    /// Fraction of the step's random crops whose top-scoring cell carries
    /// the largest label.
    pub top1: f64,
}

/// Pairs `(a, b)` of batch positions sharing a region: within each region
/// group of size `m ≥ 2`, member `i` is paired with member `(i + 1) mod m`.
pub fn inter_pairs(regions: &[Region]) -> Vec<(usize, usize)> {
    let mut groups: Vec<(Region, Vec<usize>)> = Vec::new();
    for (i, &r) in regions.iter().enumerate() {
        match groups.iter_mut().find(|(g, _)| *g == r) {
            Some((_, v)) => v.push(i),
            None => groups.push((r, vec![i])),
        }
    }
    let mut pairs = Vec::new();
    for (_, members) in groups {
        let m = members.len();
        if m >= 2 {
            pairs.extend((0..m).map(|i| (members[i], members[(i + 1) % m])));
        }
    }
    pairs
}

/// Result of one SSL step before timing is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct SslOutcome {
    pub losses: LossBreakdown,
    pub top1: f64,
    pub crops: Vec<CropBox>,
}

/// Loss graph of one batch on an existing tape.
pub struct SslGraph {
    pub l_pred: Var,
    pub l_reg: Var,
    pub l_inter: Option<Var>,
    pub total: Var,
    pub crops: Vec<CropBox>,
    pub hits: usize,
}

/// Records the SSL objective for `volumes` on `tape` against `bound`.
pub fn ssl_graph<T: Real>(
    tape: &mut Tape<T>,
    bound: &crate::model::BoundModel,
    cfg: &TrainerConfig,
    volumes: &[&Volume],
    rng: &mut Rng,
    mut trace: Option<&mut Vec<Route>>,
) -> Result<SslGraph> {
    let b = volumes.len();
    if b == 0 {
        return Err(TrainerError::EmptyDataset);
    }
    let cell = cfg.cell_size;
    let grid_shape = (cfg.grid_shape[0], cfg.grid_shape[1]);
    let mut crops = Vec::with_capacity(b);
    let mut labels = Vec::with_capacity(b);
    let mut data: Vec<Vec<f32>> = Vec::with_capacity(b);
    let mut base: Vec<Vec<f32>> = Vec::new();
    for v in volumes {
        let grid = build_base_grid(v.dims(), grid_shape, cell)?;
        let k = sample_random_crop(&grid, rng);
        labels.push(position_labels(&k, &grid)?.values);
        data.push(v.extract(k.origin, k.size));
        crops.push(k);
        base.extend(grid.cells().iter().map(|q| v.extract(q.origin, q.size)));
    }
    let n = labels[0].len();
    let c = cfg.feature_dim;
    let all: Vec<&[f32]> = data.iter().chain(base.iter()).map(Vec::as_slice).collect();
    let x = crop_batch(tape, &all, cell)?;
    let feats = bound.encoder.forward(tape, x)?.features;

    let k_enc = tape.slice(feats, 0, vec![b, c])?;
    let q_enc = tape.slice(feats, b * c, vec![b * n, c])?;
    let (ks, qt) = crate::model::project_pair(tape, bound, k_enc, q_enc)?;
    if let Some(t) = trace.as_deref_mut() {
        t.extend([Route::RandomStudent, Route::BaseTeacher]);
    }

    let mut preds = Vec::with_capacity(b);
    let mut regs = Vec::with_capacity(b);
    let mut hits = 0;
    for (i, y) in labels.iter().enumerate() {
        let k = tape.row(ks, i)?;
        let q = tape.slice(qt, i * n * c, vec![n, c])?;
        let s = similarity_rows(tape, k, q)?;
        let scores: Vec<f64> = tape.value(s).data().iter().map(|v| v.as_f64()).collect();
        hits += usize::from(crop::top1_hit(&scores, y));
        preds.push(loss_pred(tape, s, y)?);
        regs.push(loss_reg(tape, q)?);
    }
    let l_pred = tape.stack(&preds)?;
    let l_pred = tape.mean(l_pred);
    let l_reg = tape.stack(&regs)?;
    let l_reg = tape.mean(l_reg);

    let regions: Vec<Region> = volumes.iter().map(|v| v.region()).collect();
    let mut inters = Vec::new();
    for (a, bb) in inter_pairs(&regions) {
        let pair = InterPair {
            k_a: tape.slice(feats, a * c, vec![1, c])?,
            q_b: tape.slice(feats, (b + bb * n) * c, vec![n, c])?,
            region_a: regions[a],
            region_b: regions[bb],
        };
        inters.push(loss_inter(tape, pair, &bound.student, &bound.teacher, cfg.dropout_p, rng, trace.as_deref_mut())?);
    }
    let l_inter = if inters.is_empty() {
        None
    } else {
        let s = tape.stack(&inters)?;
        Some(tape.mean(s))
    };
    let mut total = tape.add(l_pred, l_reg)?;
    if let Some(li) = l_inter {
        total = tape.add(total, li)?;
    }
    Ok(SslGraph { l_pred, l_reg, l_inter, total, crops, hits })
}

/// One SSL optimisation step: loss, SGD on encoder and student, then EMA.
pub fn ssl_step<T: Real>(
    model: &mut VocoModel<T>,
    cfg: &TrainerConfig,
    volumes: &[&Volume],
    rng: &mut Rng,
    trace: Option<&mut Vec<Route>>,
) -> Result<SslOutcome> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let g = ssl_graph(&mut tape, &bound, cfg, volumes, rng, trace)?;
    let part = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v).as_f64());
    let losses = losses::loss_ssl(part(Some(g.l_pred)), part(Some(g.l_reg)), part(g.l_inter))
        .map_err(|e| TrainerError::NonFiniteLoss { batch: describe_batch(volumes, &g.crops), source: e })?;
    let grads = tape.backward(g.total)?;
    sgd_step(model.trainable_mut(), &bound.trainable_vars(), &grads, T::lit(cfg.learning_rate));
    let (teacher, student) = (&mut model.teacher, &model.student);
    teacher.ema_update(student, T::lit(cfg.rho))?;
    Ok(SslOutcome { losses, top1: g.hits as f64 / volumes.len() as f64, crops: g.crops })
}

fn describe_batch(volumes: &[&Volume], crops: &[CropBox]) -> String {
    let parts: Vec<String> = volumes.iter().zip(crops).map(|(v, k)| format!("{}{:?}@{:?}", v.region(), v.dims(), k.origin)).collect();
    format!("[{}]", parts.join(", "))
}

/// Pre-training state: model, training RNG and step counter over a fixed
/// list of volumes.
pub struct Trainer<T> {
    cfg: TrainerConfig,
    volumes: Vec<Arc<Volume>>,
    sampler: BalancedSampler,
    model: VocoModel<T>,
    rng: Rng,
    step: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: TrainerConfig, volumes: Vec<Arc<Volume>>) -> Result<Self> {
        let model = VocoModel::init(&cfg.model_config());
        Self::with_model(cfg, volumes, model)
    }

    pub fn with_model(cfg: TrainerConfig, volumes: Vec<Arc<Volume>>, model: VocoModel<T>) -> Result<Self> {
        cfg.validate()?;
        if model.feature_dim() != cfg.feature_dim {
            return Err(ModelError::IncompatibleCheckpoint(format!(
                "model has C = {}, config asks for {}",
                model.feature_dim(),
                cfg.feature_dim
            ))
            .into());
        }
        let regions: Vec<Region> = volumes.iter().map(|v| v.region()).collect();
        let sampler = BalancedSampler::new(&regions, cfg.seed)?;
        let rng = rng::stream(cfg.seed, rng::domain::TRAIN);
        Ok(Self { cfg, volumes, sampler, model, rng, step: 0 })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn model(&self) -> &VocoModel<T> {
        &self.model
    }

    pub fn into_model(self) -> VocoModel<T> {
        self.model
    }

    /// Number of completed steps.
    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self) -> Result<TrainStepRecord> {
        self.step_inner(None)
    }

    /// Like [`Trainer::step`], recording which projector each feature set
    /// went through.
    pub fn step_traced(&mut self, trace: &mut Vec<Route>) -> Result<TrainStepRecord> {
        self.step_inner(Some(trace))
    }

    fn step_inner(&mut self, trace: Option<&mut Vec<Route>>) -> Result<TrainStepRecord> {
        let start = Instant::now();
        let idx = self.sampler.batch(self.step, self.cfg.batch_volumes);
        let batch: Vec<&Volume> = idx.iter().map(|&i| self.volumes[i].as_ref()).collect();
        let out = ssl_step(&mut self.model, &self.cfg, &batch, &mut self.rng, trace)?;
        let record = TrainStepRecord { step: self.step, losses: out.losses, wall_ms: start.elapsed().as_secs_f64() * 1e3, top1: out.top1 };
        self.step += 1;
        Ok(record)
    }

    /// Runs `steps` steps, handing each record to `sink`.
    pub fn run(&mut self, steps: u64, mut sink: impl FnMut(&TrainStepRecord) -> Result<()>) -> Result<()> {
        for _ in 0..steps {
            let r = self.step()?;
            sink(&r)?;
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "pretrain",
            "step": self.step,
            "teacher_version": self.model.teacher.version(),
            "rng": RngState::capture(&self.rng),
            "layout": self.cfg.layout(),
            "config": self.cfg,
        });
        write_checkpoint(path, &meta, &self.model.named_params())?;
        Ok(())
    }

    /// Restores a trainer saved by [`Trainer::save_checkpoint`]; the
    /// config must agree on grid, cell size, feature width and precision.
    pub fn resume(cfg: TrainerConfig, volumes: Vec<Arc<Volume>>, path: impl AsRef<Path>) -> Result<Self> {
        let ckpt = read_checkpoint::<T>(path)?;
        let incompatible = |m: String| TrainerError::Model(ModelError::IncompatibleCheckpoint(m));
        if ckpt.meta.get("layout") != Some(&cfg.layout()) {
            return Err(incompatible("grid, cell size, feature width or precision differ".into()));
        }
        let field = |k: &str| ckpt.meta.get(k).cloned().ok_or_else(|| incompatible(format!("missing `{k}`")));
        let step: u64 = serde_json::from_value(field("step")?).map_err(|e| incompatible(e.to_string()))?;
        let version: u64 = serde_json::from_value(field("teacher_version")?).map_err(|e| incompatible(e.to_string()))?;
        let state: RngState = serde_json::from_value(field("rng")?).map_err(|e| incompatible(e.to_string()))?;
        let mut model = VocoModel::init(&cfg.model_config());
        model.load_named(&ckpt.tensors)?;
        model.teacher.set_version(version);
        let mut t = Self::with_model(cfg, volumes, model)?;
        t.rng = state.restore().ok_or_else(|| incompatible("bad rng state".into()))?;
        t.step = step;
        Ok(t)
    }
}

/// Loads only the model from a checkpoint written by any stage.
pub fn load_model<T: Real>(path: impl AsRef<Path>, cfg: &TrainerConfig) -> Result<VocoModel<T>> {
    let ckpt = read_checkpoint::<T>(path)?;
    if let Some(layout) = ckpt.meta.get("layout") {
        if layout != &cfg.layout() {
            return Err(ModelError::IncompatibleCheckpoint("grid, cell size, feature width or precision differ".into()).into());
        }
    }
    let mut model = VocoModel::init(&cfg.model_config());
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let tensors: Vec<_> = ckpt.tensors.into_iter().filter(|(n, _)| names.contains(n)).collect();
    model.load_named(&tensors)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{generate_phantom, PhantomSpec};

    fn small_cfg() -> TrainerConfig {
        TrainerConfig {
            grid_shape: [2, 2],
            cell_size: [8, 8, 8],
            batch_volumes: 2,
            feature_dim: 8,
            precision: Precision::F64,
            ..TrainerConfig::default()
        }
    }

    fn volumes(n: u64) -> Vec<Arc<Volume>> {
        let spec = PhantomSpec::standard(Region::Abdomen, [16, 16, 12], 5);
        (0..n).map(|i| Arc::new(generate_phantom(&spec, i).unwrap())).collect()
    }

    #[test]
    fn pairs_round_robin_within_region() {
        use Region::*;
        assert_eq!(inter_pairs(&[Abdomen, Chest, Abdomen, Head]), vec![(0, 2), (2, 0)]);
        assert_eq!(inter_pairs(&[Head, Head, Head]), vec![(0, 1), (1, 2), (2, 0)]);
        assert!(inter_pairs(&[Head, Chest]).is_empty());
    }

    #[test]
    fn zero_learning_rate_moves_only_the_teacher() {
        let cfg = TrainerConfig { learning_rate: 0.0, ..small_cfg() };
        let mut t = Trainer::<f64>::new(cfg, volumes(2)).unwrap();
        let before = t.model().clone();
        t.step().unwrap();
        assert_eq!(t.model().encoder, before.encoder);
        assert_eq!(t.model().student, before.student);
        // teacher started as a copy of the student, so EMA is a fixed point
        assert_eq!(t.model().teacher.projector(), before.teacher.projector());
        assert_eq!(t.model().teacher.version(), 1);
    }

    #[test]
    fn steps_are_deterministic() {
        let run = || {
            let mut t = Trainer::<f64>::new(small_cfg(), volumes(3)).unwrap();
            (0..3).map(|_| t.step().unwrap().losses).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_volume_batch_has_no_inter_term() {
        let cfg = TrainerConfig { batch_volumes: 1, ..small_cfg() };
        let mut t = Trainer::<f64>::new(cfg, volumes(2)).unwrap();
        assert_eq!(t.step().unwrap().losses.l_inter, 0.0);
    }
}
