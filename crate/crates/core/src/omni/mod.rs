//! Two-stage omni-supervised pre-training.
//!
//! Stage one alternates supervised segmentation steps on labeled volumes
//! with self-supervised steps on unlabeled ones. The stage-one model then
//! labels the unlabeled volumes; predictions whose mean max-probability
//! reaches the threshold are kept as pseudo labels. Stage two repeats the
//! alternation with the union of real and accepted pseudo labels.
//!
//! Supervised and self-supervised steps draw from separate RNG streams and
//! samplers, so removing one kind of step never perturbs the other.

mod head;
mod pseudo;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::losses::LossBreakdown;
use crate::model::{crop_batch, read_checkpoint, sgd_step, write_checkpoint, ModelError, VocoModel, MIN_CROP};
use crate::real::Real;
use crate::rng::{self, Rng};
use crate::trainer::{ssl_step, BalancedSampler, TrainerConfig, TrainerError};
use crate::volume::{Dataset, Volume, VolumeError};

pub use head::{BoundSegHead, SegHead};
pub use pseudo::{accepted, dice, foreground_accuracy, generate_pseudo_labels, Prediction, PseudoLabeledSample, Segmenter};

#[derive(Debug, Error)]
pub enum OmniError {
    #[error("the labeled set is empty")]
    EmptyLabeledSet,
    #[error("volume `{0}` has no label grid")]
    MissingLabels(String),
    #[error("invalid omni config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T, E = OmniError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OmniConfig {
    /// Class count including background.
    pub classes: usize,
    /// Supervised crop and inference tile extent `[x, y, z]`.
    pub seg_crop: [usize; 3],
    pub seg_batch: usize,
    pub seg_learning_rate: f64,
    /// Supervised steps per alternation cycle.
    pub sup_per_cycle: usize,
    /// Self-supervised steps per alternation cycle.
    pub ssl_per_cycle: usize,
    pub cycles: u64,
    /// Minimum confidence for a pseudo label to be kept.
    pub threshold: f64,
}

impl Default for OmniConfig {
    fn default() -> Self {
        Self {
            classes: 17,
            seg_crop: [32, 32, 32],
            seg_batch: 2,
            seg_learning_rate: 0.5,
            sup_per_cycle: 1,
            ssl_per_cycle: 1,
            cycles: 250,
            threshold: 0.8,
        }
    }
}

impl OmniConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(OmniError::InvalidConfig(m.into()));
        if self.classes < 2 {
            return bad("classes must include background and at least one organ");
        }
        if self.seg_crop.iter().any(|&c| c < MIN_CROP) {
            return bad("seg_crop below the encoder minimum of 8");
        }
        if self.seg_batch == 0 {
            return bad("seg_batch must be positive");
        }
        if !(self.seg_learning_rate >= 0.0 && self.seg_learning_rate.is_finite()) {
            return bad("seg_learning_rate must be finite and non-negative");
        }
        if self.sup_per_cycle == 0 {
            return bad("sup_per_cycle must be positive");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Encoder, projectors and segmentation head trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct OmniModel<T> {
    pub model: VocoModel<T>,
    pub head: SegHead<T>,
    /// Tile extent used for whole-volume inference.
    pub tile: [usize; 3],
}

impl<T: Real> OmniModel<T> {
    pub fn init(tcfg: &TrainerConfig, ocfg: &OmniConfig) -> Self {
        Self::from_model(VocoModel::init(&tcfg.model_config()), ocfg)
    }

    /// Wraps an existing (e.g. pre-trained) model with a fresh head.
    pub fn from_model(model: VocoModel<T>, ocfg: &OmniConfig) -> Self {
        Self { model, head: SegHead::zeros(ocfg.classes), tile: ocfg.seg_crop }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.model.named_params();
        out.extend(self.head.named_params().into_iter().map(|(n, t)| (format!("seg.{n}"), t)));
        out
    }

    pub fn save(&self, path: impl AsRef<Path>, tcfg: &TrainerConfig, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "omni",
            "layout": tcfg.layout(),
            "classes": self.head.classes(),
            "extra": extra,
        });
        write_checkpoint(path, &meta, &self.named_params())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, tcfg: &TrainerConfig, ocfg: &OmniConfig) -> Result<Self> {
        let ckpt = read_checkpoint::<T>(path)?;
        if ckpt.meta.get("layout") != Some(&tcfg.layout()) {
            return Err(ModelError::IncompatibleCheckpoint("grid, cell size, feature width or precision differ".into()).into());
        }
        let (seg, rest): (Vec<_>, Vec<_>) = ckpt.tensors.into_iter().partition(|(n, _)| n.starts_with("seg."));
        let mut om = Self::init(tcfg, ocfg);
        om.model.load_named(&rest)?;
        let expected: Vec<(String, Vec<usize>)> =
            om.head.named_params().iter().map(|(n, t)| (format!("seg.{n}"), t.shape().to_vec())).collect();
        let found: Vec<(String, Vec<usize>)> = seg.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        if expected != found {
            return Err(ModelError::IncompatibleCheckpoint("segmentation head layout differs".into()).into());
        }
        for (p, (_, t)) in om.head.params_mut().into_iter().zip(seg) {
            *p = t;
        }
        Ok(om)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Supervised,
    SelfSupervised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmniStepRecord {
    pub step: u64,
    pub kind: StepKind,
    pub seg_loss: Option<f64>,
    pub fg_accuracy: Option<f64>,
    pub ssl: Option<LossBreakdown>,
}

pub const OMNI_METRICS_HEADER: &str = "step,kind,seg_loss,fg_accuracy,l_pred,l_reg,l_inter,l_ssl";

/// One CSV row; columns that do not apply to the step kind stay empty.
pub fn omni_metrics_row(r: &OmniStepRecord) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let kind = match r.kind {
        StepKind::Supervised => "sup",
        StepKind::SelfSupervised => "ssl",
    };
    let ssl = match &r.ssl {
        Some(l) => format!("{},{},{},{}", l.l_pred, l.l_reg, l.l_inter, l.l_ssl),
        None => ",,,".into(),
    };
    format!("{},{kind},{},{},{ssl}", r.step, opt(r.seg_loss), opt(r.fg_accuracy))
}

fn random_origin(dims: [usize; 3], size: [usize; 3], rng: &mut Rng) -> [usize; 3] {
    use rand::Rng as _;
    [0, 1, 2].map(|a| rng.gen_range(0..=dims[a] - size[a]))
}

/// One cross-entropy step on random labeled crops. Returns the loss and
/// the foreground voxel accuracy of the pre-update prediction.
pub fn supervised_step<T: Real>(
    om: &mut OmniModel<T>,
    volumes: &[&Volume],
    crop: [usize; 3],
    lr: f64,
    update_encoder: bool,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    let mut data = Vec::with_capacity(volumes.len());
    let mut targets = Vec::new();
    for v in volumes {
        let size = [0, 1, 2].map(|a| crop[a].min(v.dims()[a]));
        if size != crop {
            return Err(ModelError::CropTooSmall(v.dims()).into());
        }
        let origin = random_origin(v.dims(), crop, rng);
        data.push(v.extract(origin, crop));
        let labels = v.extract_labels(origin, crop).ok_or_else(|| OmniError::MissingLabels(format!("{}", v.region())))?;
        targets.extend(labels.into_iter().map(u32::from));
    }
    let mut tape = Tape::new();
    let enc = om.model.encoder.bind(&mut tape, update_encoder);
    let head = om.head.bind(&mut tape, true);
    let refs: Vec<&[f32]> = data.iter().map(Vec::as_slice).collect();
    let x = crop_batch(&mut tape, &refs, crop)?;
    let out = enc.forward(&mut tape, x)?;
    let logits = head.forward(&mut tape, out.maps, crop)?;
    let pred = argmax_classes(tape.value(logits).data(), volumes.len(), om.head.classes());
    let fg = foreground_accuracy(&pred, &targets.iter().map(|&t| t as u16).collect::<Vec<_>>());
    let loss = tape.softmax_cross_entropy(logits, &targets)?;
    let value = tape.scalar(loss).as_f64();
    if !value.is_finite() {
        return Err(AutodiffError::NonFinite("segmentation loss".into()).into());
    }
    let grads = tape.backward(loss)?;
    let lr = T::lit(lr);
    sgd_step(om.head.params_mut(), &head.vars(), &grads, lr);
    if update_encoder {
        sgd_step(om.model.encoder.params_mut(), &enc.vars(), &grads, lr);
    }
    Ok((value, fg))
}

/// Per-voxel argmax over the class axis of `[N, K, inner]` logits, ties to
/// the lowest class.
pub(crate) fn argmax_classes<T: Real>(logits: &[T], n: usize, k: usize) -> Vec<u16> {
    let inner = logits.len() / (n * k);
    let mut out = Vec::with_capacity(n * inner);
    for b in 0..n {
        let base = b * k * inner;
        for pos in 0..inner {
            let mut best = 0;
            for c in 1..k {
                if logits[base + c * inner + pos] > logits[base + best * inner + pos] {
                    best = c;
                }
            }
            out.push(best as u16);
        }
    }
    out
}

/// Runs `cycles` alternation cycles from `init`: `sup_per_cycle`
/// supervised steps on `sup`, then `ssl_per_cycle` self-supervised steps on
/// `unlabeled` (skipped when it is empty).
pub fn train_stage<T: Real>(
    init: OmniModel<T>,
    sup: &[Arc<Volume>],
    unlabeled: &[Arc<Volume>],
    tcfg: &TrainerConfig,
    ocfg: &OmniConfig,
    mut sink: impl FnMut(&OmniStepRecord),
) -> Result<OmniModel<T>> {
    tcfg.validate()?;
    ocfg.validate()?;
    if sup.is_empty() {
        return Err(OmniError::EmptyLabeledSet);
    }
    let regions = |v: &[Arc<Volume>]| v.iter().map(|x| x.region()).collect::<Vec<_>>();
    let sup_sampler = BalancedSampler::new(&regions(sup), tcfg.seed ^ rng::domain::SUPERVISED)?;
    let ssl_sampler = if unlabeled.is_empty() { None } else { Some(BalancedSampler::new(&regions(unlabeled), tcfg.seed)?) };
    let mut sup_rng = rng::stream(tcfg.seed, rng::domain::SUPERVISED);
    let mut ssl_rng = rng::stream(tcfg.seed, rng::domain::TRAIN);
    let (mut sup_count, mut ssl_count, mut step) = (0u64, 0u64, 0u64);
    let mut om = init;
    for _ in 0..ocfg.cycles {
        for _ in 0..ocfg.sup_per_cycle {
            let idx = sup_sampler.batch(sup_count, ocfg.seg_batch);
            let batch: Vec<&Volume> = idx.iter().map(|&i| sup[i].as_ref()).collect();
            let (loss, fg) = supervised_step(&mut om, &batch, ocfg.seg_crop, ocfg.seg_learning_rate, true, &mut sup_rng)?;
            sink(&OmniStepRecord { step, kind: StepKind::Supervised, seg_loss: Some(loss), fg_accuracy: Some(fg), ssl: None });
            sup_count += 1;
            step += 1;
        }
        let Some(sampler) = &ssl_sampler else { continue };
        for _ in 0..ocfg.ssl_per_cycle {
            let idx = sampler.batch(ssl_count, tcfg.batch_volumes);
            let batch: Vec<&Volume> = idx.iter().map(|&i| unlabeled[i].as_ref()).collect();
            let out = ssl_step(&mut om.model, tcfg, &batch, &mut ssl_rng, None)?;
            sink(&OmniStepRecord { step, kind: StepKind::SelfSupervised, seg_loss: None, fg_accuracy: None, ssl: Some(out.losses) });
            ssl_count += 1;
            step += 1;
        }
    }
    Ok(om)
}

fn labeled_volumes(labeled: &Dataset) -> Result<Vec<Arc<Volume>>> {
    labeled
        .entries()
        .iter()
        .map(|e| if e.volume.labels().is_none() { Err(OmniError::MissingLabels(e.id.clone())) } else { Ok(e.volume.clone()) })
        .collect()
}

fn unlabeled_volumes(unlabeled: &Dataset) -> Vec<Arc<Volume>> {
    unlabeled.entries().iter().map(|e| Arc::new(e.volume.without_labels())).collect()
}

/// First stage: fresh model, real labels plus self-supervision.
/// Evaluation-split entries are rejected.
pub fn stage1<T: Real>(
    labeled: &Dataset,
    unlabeled: &Dataset,
    tcfg: &TrainerConfig,
    ocfg: &OmniConfig,
    sink: impl FnMut(&OmniStepRecord),
) -> Result<OmniModel<T>> {
    let labeled = labeled.training_view()?;
    let unlabeled = unlabeled.training_view()?;
    let sup = labeled_volumes(&labeled)?;
    train_stage(OmniModel::init(tcfg, ocfg), &sup, &unlabeled_volumes(&unlabeled), tcfg, ocfg, sink)
}

/// Supervised pool of the second stage: every real labeled volume, then
/// every accepted pseudo-labeled volume whose id is not already labeled.
pub fn merge_supervised(labeled: &Dataset, pseudo: &[PseudoLabeledSample], unlabeled: &Dataset) -> Result<Vec<Arc<Volume>>> {
    let mut sup = labeled_volumes(labeled)?;
    let real: std::collections::HashSet<&str> = labeled.entries().iter().map(|e| e.id.as_str()).collect();
    for p in pseudo.iter().filter(|p| p.accepted && !real.contains(p.id.as_str())) {
        if let Some(e) = unlabeled.entries().iter().find(|e| e.id == p.id) {
            sup.push(Arc::new(e.volume.with_labels(p.labels.clone())?));
        }
    }
    Ok(sup)
}

/// Second stage: continues from `init` with real and accepted pseudo
/// labels plus self-supervision.
pub fn stage2<T: Real>(
    init: OmniModel<T>,
    labeled: &Dataset,
    pseudo: &[PseudoLabeledSample],
    unlabeled: &Dataset,
    tcfg: &TrainerConfig,
    ocfg: &OmniConfig,
    sink: impl FnMut(&OmniStepRecord),
) -> Result<OmniModel<T>> {
    let labeled = labeled.training_view()?;
    let unlabeled = unlabeled.training_view()?;
    let sup = merge_supervised(&labeled, pseudo, &unlabeled)?;
    train_stage(init, &sup, &unlabeled_volumes(&unlabeled), tcfg, ocfg, sink)
}
