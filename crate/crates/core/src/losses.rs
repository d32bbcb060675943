//! Similarity prediction and the three self-supervised loss terms.
//!
//! * `L_pred = −(1/n) Σ log(1 − d_i)` with `d_i = |y_i − s_i|`, the
//!   distance between overlap labels and cosine similarities.
//! * `L_reg = 2/(n(n−1)) Σ_{i<j} |cos(q_i, q_j)|` keeps base crops apart.
//! * `L_inter` applies the `L_pred` form to the student similarities of a
//!   crop from one volume against base crops of another volume and the
//!   teacher similarities of their dropout-augmented features.
//!
//! Distances are clamped to `1 − 1e-6` before the logarithm because raw
//! cosine similarities live in `[−1, 1]`, which allows `d_i ≥ 1`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::model::{BoundProjector, ModelError};
use crate::real::Real;
use crate::volume::Region;

/// Guard on cosine-similarity denominators.
pub const COS_EPS: f64 = 1e-8;
/// Upper clamp on distances fed to `log(1 − d)`.
pub const MAX_DISTANCE: f64 = 1.0 - 1e-6;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("feature {0} has (near) zero norm")]
    DegenerateFeature(usize),
    #[error("at least two base crops are needed, got {0}")]
    NotEnoughBaseCrops(usize),
    #[error("inter-volume pair spans regions {0} and {1}")]
    RegionPairingError(Region, Region),
    #[error("non-finite loss term `{0}`")]
    NonFiniteLoss(&'static str),
    #[error("{0} similarities for {1} labels")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityVector {
    pub values: Vec<f64>,
}

/// Scalar values of the three terms and their sum for one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pred: f64,
    pub l_reg: f64,
    pub l_inter: f64,
    pub l_ssl: f64,
}

/// `⟨a, b⟩ / max(‖a‖·‖b‖, ε)`.
pub fn cos_sim<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let dot = tape.dot(a, b)?;
    let na = tape.l2_norm(a);
    let nb = tape.l2_norm(b);
    let denom = tape.mul(na, nb)?;
    let denom = tape.clamp_min(denom, T::lit(COS_EPS));
    Ok(tape.div(dot, denom)?)
}

/// Similarities of row 0 of `k` (`[1, C]` or `[C]`) with every row of `q`
/// (`[n, C]`), as an `[n]` vector.
pub fn similarity_rows<T: Real>(tape: &mut Tape<T>, k: Var, q: Var) -> Result<Var> {
    let k = if tape.shape(k).len() == 2 { tape.row(k, 0)? } else { k };
    let n = tape.shape(q)[0];
    let mut parts = Vec::with_capacity(n);
    for i in 0..n {
        let qi = tape.row(q, i)?;
        parts.push(cos_sim(tape, k, qi)?);
    }
    Ok(tape.stack(&parts)?)
}

/// `−(1/n) Σ log(1 − min(|a_i − b_i|, MAX_DISTANCE))`.
pub fn distance_entropy<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let d = tape.abs(diff);
    let d = tape.clamp_max(d, T::lit(MAX_DISTANCE));
    let nd = tape.neg(d);
    let one_minus = tape.add_scalar(nd, T::one());
    let logs = tape.log(one_minus)?;
    let m = tape.mean(logs);
    Ok(tape.neg(m))
}

/// Position-prediction loss of similarities `s` (`[n]`) against labels.
pub fn loss_pred<T: Real>(tape: &mut Tape<T>, s: Var, labels: &[f64]) -> Result<Var> {
    if tape.value(s).len() != labels.len() {
        return Err(LossError::LengthMismatch(tape.value(s).len(), labels.len()));
    }
    let y = tape.constant(Tensor::vector(labels.iter().map(|&v| T::lit(v)).collect()));
    distance_entropy(tape, y, s)
}

/// Mean absolute pairwise cosine similarity of the rows of `q` (`[n, C]`).
pub fn loss_reg<T: Real>(tape: &mut Tape<T>, q: Var) -> Result<Var> {
    let n = tape.shape(q)[0];
    if n < 2 {
        return Err(LossError::NotEnoughBaseCrops(n));
    }
    let rows = (0..n).map(|i| tape.row(q, i)).collect::<Result<Vec<_>, _>>()?;
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let c = cos_sim(tape, rows[i], rows[j])?;
            pairs.push(tape.abs(c));
        }
    }
    let all = tape.stack(&pairs)?;
    Ok(tape.mean(all))
}

/// Inputs of one inter-volume term: encoder features of the random crop of
/// volume A (`[1, C]`) and of the base crops of volume B (`[n, C]`).
#[derive(Debug, Clone, Copy)]
pub struct InterPair {
    pub k_a: Var,
    pub q_b: Var,
    pub region_a: Region,
    pub region_b: Region,
}

/// Which projector each feature set passed through, in call order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Route {
    /// Random crop through the student projector.
    RandomStudent,
    /// Base crops through the teacher projector.
    BaseTeacher,
    /// Inter-volume random crop, unaugmented, through the student.
    InterRandomStudent,
    /// Inter-volume base crops, unaugmented, through the student.
    InterBaseStudent,
    /// Inter-volume random crop after dropout, through the teacher.
    InterRandomTeacher,
    /// Inter-volume base crops after dropout, through the teacher.
    InterBaseTeacher,
}

/// Consistency between `CosSim(p_s(k_A), p_s(q_B))` and
/// `CosSim(p_t(k'_A), p_t(q'_B))`, where primes denote feature dropout.
pub fn loss_inter<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    pair: InterPair,
    student: &BoundProjector,
    teacher: &BoundProjector,
    dropout_p: f64,
    rng: &mut R,
    mut trace: Option<&mut Vec<Route>>,
) -> Result<Var> {
    if pair.region_a != pair.region_b {
        return Err(LossError::RegionPairingError(pair.region_a, pair.region_b));
    }
    let mut log = |r: Route| {
        if let Some(t) = trace.as_deref_mut() {
            t.push(r);
        }
    };
    let ks = student.forward(tape, pair.k_a)?;
    log(Route::InterRandomStudent);
    let qs = student.forward(tape, pair.q_b)?;
    log(Route::InterBaseStudent);
    let y_s = similarity_rows(tape, ks, qs)?;

    let k_aug = tape.dropout(pair.k_a, dropout_p, rng)?;
    let q_aug = tape.dropout(pair.q_b, dropout_p, rng)?;
    let kt = teacher.forward(tape, k_aug)?;
    log(Route::InterRandomTeacher);
    let qt = teacher.forward(tape, q_aug)?;
    log(Route::InterBaseTeacher);
    let y_t = similarity_rows(tape, kt, qt)?;
    distance_entropy(tape, y_s, y_t)
}

/// Unweighted sum of the three terms.
pub fn loss_ssl(l_pred: f64, l_reg: f64, l_inter: f64) -> Result<LossBreakdown> {
    for (name, v) in [("l_pred", l_pred), ("l_reg", l_reg), ("l_inter", l_inter)] {
        if !v.is_finite() {
            return Err(LossError::NonFiniteLoss(name));
        }
    }
    Ok(LossBreakdown { l_pred, l_reg, l_inter, l_ssl: l_pred + l_reg + l_inter })
}

fn check_features(feats: &[&[f64]]) -> Result<()> {
    for (i, f) in feats.iter().enumerate() {
        if f.iter().map(|v| v * v).sum::<f64>().sqrt() <= COS_EPS {
            return Err(LossError::DegenerateFeature(i));
        }
    }
    Ok(())
}

fn matrix(tape: &mut Tape<f64>, rows: &[Vec<f64>]) -> Result<Var> {
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(AutodiffError::Shape("feature rows differ in length".into()).into());
    }
    let data = rows.iter().flatten().copied().collect();
    Ok(tape.constant(Tensor::new(vec![rows.len(), c], data)?))
}

/// Cosine similarities of `k` with each `q_i`. Zero-norm inputs are
/// rejected; index 0 is `k`, `i + 1` is `q_i`.
pub fn similarity(k: &[f64], qs: &[Vec<f64>]) -> Result<SimilarityVector> {
    let mut all: Vec<&[f64]> = vec![k];
    all.extend(qs.iter().map(Vec::as_slice));
    check_features(&all)?;
    let mut tape = Tape::new();
    let kv = tape.constant(Tensor::vector(k.to_vec()));
    let q = matrix(&mut tape, qs)?;
    let s = similarity_rows(&mut tape, kv, q)?;
    Ok(SimilarityVector { values: tape.value(s).data().to_vec() })
}

/// Value of [`loss_pred`] for plain slices.
pub fn loss_pred_value(s: &[f64], y: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let sv = tape.constant(Tensor::vector(s.to_vec()));
    let l = loss_pred(&mut tape, sv, y)?;
    Ok(tape.scalar(l))
}

/// Value of [`loss_reg`] for plain feature vectors.
pub fn loss_reg_value(qs: &[Vec<f64>]) -> Result<f64> {
    if qs.len() < 2 {
        return Err(LossError::NotEnoughBaseCrops(qs.len()));
    }
    let all: Vec<&[f64]> = qs.iter().map(Vec::as_slice).collect();
    check_features(&all)?;
    let mut tape = Tape::new();
    let q = matrix(&mut tape, qs)?;
    let l = loss_reg(&mut tape, q)?;
    Ok(tape.scalar(l))
}

/// Value of the inter-volume consistency term for given similarity
/// vectors.
pub fn consistency_value(y_s: &[f64], y_t: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(y_s.to_vec()));
    let b = tape.constant(Tensor::vector(y_t.to_vec()));
    let l = distance_entropy(&mut tape, a, b)?;
    Ok(tape.scalar(l))
}
