use super::layers::Linear;
use super::Result;
use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::real::Real;
use crate::rng::Rng;

/// Two-layer perceptron `C → C → C` with ReLU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector<T> {
    pub l1: Linear<T>,
    pub l2: Linear<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundProjector {
    l1: (Var, Var),
    l2: (Var, Var),
}

impl<T: Real> Projector<T> {
    pub fn init(dim: usize, rng: &mut Rng) -> Self {
        Self { l1: Linear::init(dim, dim, rng), l2: Linear::init(dim, dim, rng) }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundProjector {
        BoundProjector { l1: self.l1.bind(tape, trainable), l2: self.l2.bind(tape, trainable) }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("l1.weight".into(), &self.l1.weight),
            ("l1.bias".into(), &self.l1.bias),
            ("l2.weight".into(), &self.l2.weight),
            ("l2.bias".into(), &self.l2.bias),
        ]
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.l1.weight, &self.l1.bias, &self.l2.weight, &self.l2.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.l1.weight, &mut self.l1.bias, &mut self.l2.weight, &mut self.l2.bias]
    }
}

impl BoundProjector {
    pub(crate) fn from_vars(v: &[Var]) -> Self {
        Self { l1: (v[0], v[1]), l2: (v[2], v[3]) }
    }

    /// Parameter handles in [`Projector::params_mut`] order.
    pub fn vars(&self) -> Vec<Var> {
        vec![self.l1.0, self.l1.1, self.l2.0, self.l2.1]
    }

    /// `[N, C] → [N, C]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = Linear::forward(tape, self.l1, x)?;
        let h = tape.relu(h);
        Ok(Linear::forward(tape, self.l2, h)?)
    }
}

/// `θ_t ← ρ·θ_t + (1 − ρ)·θ_s`, elementwise.
pub fn ema_update<T: Real>(teacher: &mut [T], student: &[T], rho: T) -> Result<(), AutodiffError> {
    if teacher.len() != student.len() {
        return Err(AutodiffError::Shape(format!("ema_update: teacher has {} values, student {}", teacher.len(), student.len())));
    }
    let keep = T::one() - rho;
    for (t, &s) in teacher.iter_mut().zip(student) {
        *t = rho * *t + keep * s;
    }
    Ok(())
}

/// Frozen projector whose only mutation path is the EMA update.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherProjector<T> {
    inner: Projector<T>,
    version: u64,
}

impl<T: Real> TeacherProjector<T> {
    pub fn from_student(student: &Projector<T>) -> Self {
        Self { inner: student.clone(), version: 0 }
    }

    pub fn projector(&self) -> &Projector<T> {
        &self.inner
    }

    /// Number of EMA updates applied since construction or restore.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn ema_update(&mut self, student: &Projector<T>, rho: T) -> Result<(), AutodiffError> {
        for (t, s) in self.inner.params_mut().into_iter().zip(student.params()) {
            if t.shape() != s.shape() {
                return Err(AutodiffError::Shape(format!("ema_update: teacher {:?} vs student {:?}", t.shape(), s.shape())));
            }
            ema_update(t.data_mut(), s.data(), rho)?;
        }
        self.version += 1;
        Ok(())
    }

    pub(crate) fn restore(&mut self, params: Vec<Tensor<T>>) {
        for (dst, src) in self.inner.params_mut().into_iter().zip(params) {
            *dst = src;
        }
    }

    pub(crate) fn set_version(&mut self, v: u64) {
        self.version = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_with_default_momentum() {
        let mut t = [1.0f64];
        ema_update(&mut t, &[0.0], 0.9).unwrap();
        assert_eq!(t[0], 0.9);
    }

    #[test]
    fn equal_parameters_are_a_fixed_point() {
        let mut t = [0.25f64, -3.5];
        ema_update(&mut t, &[0.25, -3.5], 0.9).unwrap();
        assert_eq!(t, [0.25, -3.5]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut t = [0.0f64; 3];
        assert!(ema_update(&mut t, &[0.0; 2], 0.9).is_err());
    }

    #[test]
    fn geometric_decay_toward_constant_student() {
        let (rho, theta0, target) = (0.9f64, 2.0f64, -1.0f64);
        let mut t = [theta0];
        for step in 1..=50 {
            ema_update(&mut t, &[target], rho).unwrap();
            let want = rho.powi(step) * (theta0 - target).abs();
            let got = (t[0] - target).abs();
            assert!((got - want).abs() <= 64.0 * f64::EPSILON * want.max(1e-300) + 4.0 * f64::EPSILON, "step {step}");
        }
    }

    #[test]
    fn teacher_version_counts_updates() {
        let s: Projector<f64> = Projector::init(4, &mut crate::rng::stream(0, 0));
        let mut t = TeacherProjector::from_student(&s);
        assert_eq!(t.version(), 0);
        t.ema_update(&s, 0.9).unwrap();
        t.ema_update(&s, 0.9).unwrap();
        assert_eq!(t.version(), 2);
        assert_eq!(t.projector(), &s);
    }
}
