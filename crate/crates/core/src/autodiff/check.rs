//! Central finite-difference verification of tape gradients.

use super::{Result, Tape, Tensor, Var};

/// Lower bound on the denominator of [`rel_error`]; below it the error is
/// effectively absolute, so near-zero gradients are not judged on noise.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// `|a − b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

fn evaluate<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    tape.check_finite()?;
    Ok(tape.scalar(out))
}

/// Compares the tape gradient of scalar `f` at `x` with central
/// differences of step `h`. Passes iff the largest [`rel_error`] is below
/// `tol`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var> + Sync,
{
    use rayon::prelude::*;

    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    tape.check_finite()?;
    let grads = tape.backward(out)?;
    let analytic = grads.get_or_zeros(v, x.len()).to_vec();
    if let Some(bad) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(super::AutodiffError::NonFinite(format!("gradient coordinate {bad}")));
    }

    let numeric = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            Ok((evaluate(&f, &plus)? - evaluate(&f, &minus)?) / (2.0 * h))
        })
        .collect::<Result<Vec<f64>>>()?;

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheckReport { analytic, numeric, max_rel_error, worst_index, passed: max_rel_error < tol })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_unit_gradient() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let r = grad_check(|t, v| Ok(t.sum(v)), &x, 1e-5, 1e-9).unwrap();
        assert!(r.analytic.iter().all(|&g| g == 1.0));
        assert!(r.passed, "{}", r.max_rel_error);
    }

    #[test]
    fn non_finite_values_are_reported() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let r = grad_check(
            |t, v| {
                let s = t.scale(v, 1e308);
                let s = t.scale(s, 1e308);
                Ok(t.sum(s))
            },
            &x,
            1e-5,
            1e-6,
        );
        assert!(matches!(r, Err(super::super::AutodiffError::NonFinite(_))));
    }
}
