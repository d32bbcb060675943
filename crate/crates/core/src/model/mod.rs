//! Volumetric encoder, student/teacher projectors and the EMA rule.
//!
//! The student path (encoder + student projector) is trained by gradient
//! descent. The teacher projector starts as a copy of the student and is
//! afterwards changed only by [`TeacherProjector::ema_update`].

mod checkpoint;
mod encoder;
mod layers;
mod projector;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Gradients, Tape, Tensor, Var};
use crate::real::Real;
use crate::rng;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointFile, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use encoder::{crop_batch, BoundEncoder, Encoder, EncoderOutput, CHANNELS, MIN_CROP};
pub use layers::{ConvLayer, Linear};
pub use projector::{ema_update, BoundProjector, Projector, TeacherProjector};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("crop {0:?} is smaller than the minimum of {MIN_CROP} voxels per axis")]
    CropTooSmall([usize; 3]),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature width C of encoder output and projector layers.
    pub feature_dim: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { feature_dim: 128, init_seed: 0 }
    }
}

/// Encoder plus student and teacher projectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VocoModel<T> {
    pub encoder: Encoder<T>,
    pub student: Projector<T>,
    pub teacher: TeacherProjector<T>,
}

/// Parameters of a [`VocoModel`] placed on a tape. Encoder and student are
/// trainable leaves, the teacher is constant.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub encoder: BoundEncoder,
    pub student: BoundProjector,
    pub teacher: BoundProjector,
}

impl<T: Real> VocoModel<T> {
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = rng::stream(cfg.init_seed, rng::domain::INIT);
        let encoder = Encoder::init(cfg.feature_dim, &mut rng);
        let student = Projector::init(cfg.feature_dim, &mut rng);
        let teacher = TeacherProjector::from_student(&student);
        Self { encoder, student, teacher }
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.feature_dim()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundModel {
        BoundModel {
            encoder: self.encoder.bind(tape, true),
            student: self.student.bind(tape, true),
            teacher: self.teacher.projector().bind(tape, false),
        }
    }

    /// Encoder and student parameters concatenated in
    /// [`VocoModel::trainable_mut`] order.
    pub fn trainable_flat(&self) -> Tensor<T> {
        let mut data = Vec::new();
        for (_, t) in self.encoder.named_params().into_iter().chain(self.student.named_params()) {
            data.extend_from_slice(t.data());
        }
        Tensor::vector(data)
    }

    /// Binds the model with its trainable parameters read from slices of
    /// `flat` (laid out as [`VocoModel::trainable_flat`]), so gradients
    /// with respect to every trainable value land on one leaf.
    pub fn bind_flat(&self, tape: &mut Tape<T>, flat: Var) -> Result<BoundModel> {
        let shapes: Vec<Vec<usize>> =
            self.encoder.named_params().into_iter().chain(self.student.named_params()).map(|(_, t)| t.shape().to_vec()).collect();
        let mut vars = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for shape in shapes {
            let len: usize = shape.iter().product();
            vars.push(tape.slice(flat, offset, shape)?);
            offset += len;
        }
        if offset != tape.value(flat).len() {
            return Err(AutodiffError::Shape(format!("{} flat values for {offset} parameters", tape.value(flat).len())).into());
        }
        Ok(BoundModel {
            encoder: BoundEncoder::from_vars(&vars[..8]),
            student: BoundProjector::from_vars(&vars[8..]),
            teacher: self.teacher.projector().bind(tape, false),
        })
    }

    /// Named parameters in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = prefixed("encoder", self.encoder.named_params());
        out.extend(prefixed("student", self.student.named_params()));
        out.extend(prefixed("teacher", self.teacher.projector().named_params()));
        out
    }

    /// Trainable tensors (encoder then student projector), in bind order.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.encoder.params_mut();
        out.extend(self.student.params_mut());
        out
    }

    /// Replaces every parameter from `named`, which must match names and
    /// shapes exactly.
    pub fn load_named(&mut self, named: &[(String, Tensor<T>)]) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = self.named_params().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        let found: Vec<(String, Vec<usize>)> = named.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        if expected != found {
            return Err(ModelError::IncompatibleCheckpoint(format!(
                "parameter layout differs (expected {} tensors, found {})",
                expected.len(),
                found.len()
            )));
        }
        let mut it = named.iter().map(|(_, t)| t.clone());
        for p in self.encoder.params_mut() {
            *p = it.next().unwrap();
        }
        for p in self.student.params_mut() {
            *p = it.next().unwrap();
        }
        let teacher: Vec<Tensor<T>> = it.collect();
        self.teacher.restore(teacher);
        Ok(())
    }
}

pub(crate) fn prefixed<'a, T>(prefix: &str, v: Vec<(String, &'a Tensor<T>)>) -> Vec<(String, &'a Tensor<T>)> {
    v.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

impl BoundModel {
    /// Handles matching [`VocoModel::trainable_mut`] one to one.
    pub fn trainable_vars(&self) -> Vec<Var> {
        let mut out = self.encoder.vars();
        out.extend(self.student.vars());
        out
    }
}

/// Routes encoder features of random crops (`k`, `[N, C]`) through the
/// student projector and of base crops (`q`, `[M, C]`) through the teacher.
pub fn project_pair(tape: &mut Tape<impl Real>, bound: &BoundModel, k: Var, q: Var) -> Result<(Var, Var)> {
    let s = bound.student.forward(tape, k)?;
    let t = bound.teacher.forward(tape, q)?;
    Ok((s, t))
}

/// Plain SGD on `params` using the gradients of the matching `vars`.
pub fn sgd_step<T: Real>(params: Vec<&mut Tensor<T>>, vars: &[Var], grads: &Gradients<T>, lr: T) {
    for (p, &v) in params.into_iter().zip(vars) {
        if let Some(g) = grads.get(v) {
            for (w, &d) in p.data_mut().iter_mut().zip(g) {
                *w = *w - lr * d;
            }
        }
    }
}
