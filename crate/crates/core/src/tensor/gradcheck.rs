//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::Rng;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Largest discrepancy found by [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Options for [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates checked per parameter tensor; `None` checks all of them.
    pub samples_per_param: Option<usize>,
    /// Lower bound of the relative-error denominator, so that two vanishing
    /// gradients do not produce 0/0.
    pub denom_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-3,
            samples_per_param: None,
            denom_floor: 1e-3,
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of the scalar `loss(params)` against central
/// differences `(f(p + h) - f(p - h)) / 2h`.
///
/// `loss` receives one tensor per entry of `params`, in order. Analytic
/// gradients are taken with fresh trainable copies; numeric probes use
/// untracked copies, so only the forward pass is shared between both routes.
pub fn check_gradients<T, F, R>(
    params: &[(String, Tensor<T>)],
    loss: F,
    opts: &GradCheckOptions,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&[Tensor<T>]) -> Result<Tensor<T>>,
    R: Rng + ?Sized,
{
    let leaves: Vec<Tensor<T>> = params.iter().map(|(_, t)| t.detach().into_param()).collect();
    let l = loss(&leaves)?;
    l.backward()?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let constants: Vec<Tensor<T>> = params.iter().map(|(_, t)| t.detach()).collect();

    for (pi, (name, leaf)) in params.iter().map(|(n, _)| n).zip(&leaves).enumerate() {
        let grad = leaf
            .grad()
            .ok_or_else(|| Error::invalid(format!("parameter {name} received no gradient")))?;
        let indices: Vec<usize> = match opts.samples_per_param {
            Some(k) if k < leaf.numel() => sample(rng, leaf.numel(), k).into_vec(),
            _ => (0..leaf.numel()).collect(),
        };
        for idx in indices {
            let probe = |delta: f64| -> Result<f64> {
                let mut data = constants[pi].data().to_vec();
                data[idx] = T::from_f64(data[idx].as_f64() + delta);
                let mut inputs = constants.clone();
                inputs[pi] = Tensor::new(leaf.shape(), data)?;
                Ok(loss(&inputs)?.item().as_f64())
            };
            let numeric = (probe(opts.step)? - probe(-opts.step)?) / (2.0 * opts.step);
            let analytic = grad[idx].as_f64();
            let err = relative_error(analytic, numeric, opts.denom_floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = idx;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Like [`check_gradients`] but with analytic gradients from the `f32` graph
/// and numeric derivatives from an `f64` evaluation of the same function, so
/// that rounding in the probes does not mask errors in the backward pass.
pub fn check_gradients_f32<F, G, R>(
    params: &[(String, Tensor<f32>)],
    loss32: F,
    loss64: G,
    opts: &GradCheckOptions,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f32>]) -> Result<Tensor<f32>>,
    G: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    R: Rng + ?Sized,
{
    let leaves: Vec<Tensor<f32>> = params.iter().map(|(_, t)| t.detach().into_param()).collect();
    loss32(&leaves)?.backward()?;
    let constants: Vec<Tensor<f64>> = params
        .iter()
        .map(|(_, t)| Tensor::new(t.shape(), t.to_f64_vec()))
        .collect::<Result<_>>()?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (pi, ((name, _), leaf)) in params.iter().zip(&leaves).enumerate() {
        let grad = leaf
            .grad()
            .ok_or_else(|| Error::invalid(format!("parameter {name} received no gradient")))?;
        let indices: Vec<usize> = match opts.samples_per_param {
            Some(k) if k < leaf.numel() => sample(rng, leaf.numel(), k).into_vec(),
            _ => (0..leaf.numel()).collect(),
        };
        for idx in indices {
            let probe = |delta: f64| -> Result<f64> {
                let mut data = constants[pi].data().to_vec();
                data[idx] += delta;
                let mut inputs = constants.clone();
                inputs[pi] = Tensor::new(leaf.shape(), data)?;
                Ok(loss64(&inputs)?.item())
            };
            let numeric = (probe(opts.step)? - probe(-opts.step)?) / (2.0 * opts.step);
            let analytic = grad[idx] as f64;
            let err = relative_error(analytic, numeric, opts.denom_floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = idx;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
