//! Central finite differences, the oracle every analytic gradient in the
//! crate is checked against. Always evaluated in `f64`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DiffError, ParamSet, Result, Tensor};

/// Denominator floor for the relative error, so entries whose true gradient
/// is (numerically) zero are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn central_difference<F>(loss_fn: &mut F, x: &mut Tensor<f64>, i: usize, step: f64) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let orig = x.data()[i];
    x.data_mut()[i] = orig + step;
    let plus = loss_fn(x);
    x.data_mut()[i] = orig - step;
    let minus = loss_fn(x);
    x.data_mut()[i] = orig;
    for (stage, v) in [("f(x+h)", plus), ("f(x-h)", minus)] {
        if !v.is_finite() {
            return Err(DiffError::NonFinite {
                stage: stage.into(),
                index: i,
                value: v,
            });
        }
    }
    Ok((plus - minus) / (2.0 * step))
}

/// `(f(x+h) − f(x−h)) / 2h` for every entry of `x`.
pub fn finite_diff_grad<F>(mut loss_fn: F, x: &Tensor<f64>, step: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    let vals = finite_diff_entries(&mut loss_fn, x, step, &all)?;
    Tensor::from_vec(x.shape(), vals)
}

/// Central differences at the given flat indices only.
pub fn finite_diff_entries<F>(
    mut loss_fn: F,
    x: &Tensor<f64>,
    step: f64,
    indices: &[usize],
) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    if !(step > 0.0) {
        return Err(DiffError::Invalid(format!("step must be positive, got {step}")));
    }
    let mut x = x.clone();
    indices
        .iter()
        .map(|&i| central_difference(&mut loss_fn, &mut x, i, step))
        .collect()
}

/// Which entries of a parameter to probe: everything for small tensors,
/// otherwise a seeded random subset of `max_entries`.
pub fn probe_indices(numel: usize, max_entries: usize, seed: u64) -> Vec<usize> {
    if numel <= max_entries {
        return (0..numel).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, numel, max_entries).into_vec();
    idx.sort_unstable();
    idx
}

/// Compares the analytic grads stored in `params` against central differences
/// of `loss_fn`, one report per parameter.
pub fn check_gradients<F>(
    params: &ParamSet<f64>,
    mut loss_fn: F,
    step: f64,
    max_entries: usize,
    seed: u64,
) -> Result<Vec<GradReport>>
where
    F: FnMut(&ParamSet<f64>) -> f64,
{
    let mut probe = params.clone();
    let mut reports = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let p = params.get(super::ParamId(pi));
        let idx = probe_indices(p.value.numel(), max_entries, seed ^ ((pi as u64) << 20));
        let mut max_rel: f64 = 0.0;
        let (mut an2, mut nu2) = (0.0, 0.0);
        for &i in &idx {
            let orig = p.value.data()[i];
            let mut eval = |v: f64, probe: &mut ParamSet<f64>| {
                probe.get_mut(super::ParamId(pi)).value.data_mut()[i] = v;
                loss_fn(probe)
            };
            let plus = eval(orig + step, &mut probe);
            let minus = eval(orig - step, &mut probe);
            eval(orig, &mut probe);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(DiffError::NonFinite {
                    stage: format!("finite difference of {}", p.name),
                    index: i,
                    value: if plus.is_finite() { minus } else { plus },
                });
            }
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = p.grad.data()[i];
            max_rel = max_rel.max(relative_error(analytic, numeric));
            an2 += analytic * analytic;
            nu2 += numeric * numeric;
        }
        reports.push(GradReport {
            name: p.name.clone(),
            max_rel_error: max_rel,
            analytic_norm: an2.sqrt(),
            numeric_norm: nu2.sqrt(),
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, 1e-4).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-7);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::from_vec(&[4], vec![1.0, -2.0, 3.5, 0.0]).unwrap();
        let g = finite_diff_grad(|_| 42.0, &x, 1e-4).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_of_squares_matches_two_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let x = Tensor::from_vec(&[5], data.clone()).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-4).unwrap();
        for (gi, xi) in g.data().iter().zip(&data) {
            assert!((gi - 2.0 * xi).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_perturbation_is_an_error() {
        let x = Tensor::scalar(0.0);
        let r = finite_diff_grad(|t| 1.0 / (t.data()[0] - 1e-4), &x, 1e-4);
        assert!(matches!(r, Err(DiffError::NonFinite { .. })));
    }

    #[test]
    fn non_positive_step_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_grad(|t| t.data()[0], &x, 0.0).is_err());
    }

    #[test]
    fn probe_subset_is_deterministic() {
        assert_eq!(probe_indices(10, 20, 1), (0..10).collect::<Vec<_>>());
        let a = probe_indices(1000, 16, 5);
        assert_eq!(a, probe_indices(1000, 16, 5));
        assert_eq!(a.len(), 16);
    }
}
