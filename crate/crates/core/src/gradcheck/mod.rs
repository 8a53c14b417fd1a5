//! Central finite-difference verification of analytic gradients.

mod suite;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use suite::{run_suite, SuiteCase, SuiteOptions};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `|analytic - numeric| / max(1, |numeric|)` per checked element.
    pub rel_errors: Vec<f64>,
    /// Flat indices of the checked elements, parallel to `rel_errors`.
    pub indices: Vec<usize>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn compare(analytic: &[f64], numeric: &[f64], indices: Vec<usize>, tol: f64) -> Self {
        assert_eq!(analytic.len(), numeric.len());
        let rel_errors: Vec<f64> = analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
            .collect();
        let max_rel_error = rel_errors.iter().copied().fold(0.0, f64::max);
        GradCheckReport {
            passed: max_rel_error <= tol && rel_errors.iter().all(|e| e.is_finite()),
            rel_errors,
            indices,
            max_rel_error,
            tol,
        }
    }

    /// Index of the element with the largest error.
    pub fn worst_index(&self) -> Option<usize> {
        self.rel_errors
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| self.indices[i])
    }
}

/// Central differences of a scalar function at the given flat indices of `x`.
pub fn numeric_gradient<T: Scalar>(
    mut eval: impl FnMut(&Tensor<T>) -> Result<f64>,
    x: &Tensor<T>,
    indices: &[usize],
    step: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::lit(orig.as_f64() + step);
        let plus = eval(&probe)?;
        probe.data_mut()[i] = T::lit(orig.as_f64() - step);
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                what: "finite-difference evaluation".into(),
                index: i,
            });
        }
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Checks the gradient of a scalar-valued tensor function at `x`, over every
/// element of `x`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, step: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'t> Fn(&Var<'t, T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let xv = tape.variable(x.clone());
    let y = f(&xv)?;
    if let Some(i) = y.value().first_non_finite() {
        return Err(Error::NonFinite {
            what: "function value".into(),
            index: i,
        });
    }
    let grads = y.backward()?;
    let analytic: Vec<f64> = grads
        .wrt(&xv)
        .expect("variable leaf has a gradient")
        .data()
        .iter()
        .map(|v| v.as_f64())
        .collect();
    let indices: Vec<usize> = (0..x.numel()).collect();
    let numeric = numeric_gradient(
        |p| {
            let tape = Tape::inference();
            scalar_value(&f(&tape.constant(p.clone()))?)
        },
        x,
        &indices,
        step,
    )?;
    Ok(GradCheckReport::compare(&analytic, &numeric, indices, tol))
}

fn scalar_value<T: Scalar>(y: &Var<'_, T>) -> Result<f64> {
    y.item().map(|v| v.as_f64()).ok_or_else(|| Error::NotScalar {
        shape: y.shape().to_vec(),
    })
}

/// Gradient check of a scalar function of named parameters. Each tensor is
/// probed at up to `per_tensor` elements drawn with `seed`; smaller tensors
/// are checked in full. Returns one report per parameter, in set order.
pub fn grad_check_params<T, F>(
    params: &ParamSet<T>,
    f: F,
    per_tensor: usize,
    seed: u64,
    step: f64,
    tol: f64,
) -> Result<Vec<(String, GradCheckReport)>>
where
    T: Scalar,
    F: for<'t> Fn(&Bound<'t, T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let y = f(&Bound::bind(&tape, params, true)?)?;
    scalar_value(&y)?;
    let grads = y.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for (name, value) in params.iter() {
        let numel = value.numel();
        let mut indices: Vec<usize> = if numel <= per_tensor {
            (0..numel).collect()
        } else {
            sample(&mut rng, numel, per_tensor).into_vec()
        };
        indices.sort_unstable();
        let grad = grads
            .get(name)
            .ok_or_else(|| Error::MissingGradient(name.to_string()))?;
        let analytic: Vec<f64> = indices.iter().map(|&i| grad.data()[i].as_f64()).collect();
        let numeric = numeric_gradient(
            |t| {
                *probe.get_mut(name)? = t.clone();
                let tape = Tape::inference();
                scalar_value(&f(&Bound::bind(&tape, &probe, false)?)?)
            },
            value,
            &indices,
            step,
        )?;
        *probe.get_mut(name)? = value.clone();
        out.push((
            name.to_string(),
            GradCheckReport::compare(&analytic, &numeric, indices, tol),
        ));
    }
    Ok(out)
}
