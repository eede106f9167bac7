//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;

use super::params::{describe, Module, TensorRole};
use crate::rng::stream;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor in the relative error, so that gradients near zero
    /// are compared absolutely.
    pub floor: f64,
    /// Check at most this many coordinates per tensor (chosen at random).
    pub max_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-4,
            max_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor name and coordinate of the worst mismatch.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
        }
    }

    fn record(&mut self, name: &str, k: usize, analytic: f64, numeric: f64, floor: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            if err >= self.max_rel_error {
                self.worst = Some((name.to_owned(), k));
            }
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn coords(len: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    match opts.max_per_tensor {
        Some(m) if m < len => {
            let mut idx = sample(&mut stream(opts.seed, &[salt]), len, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// Compares the trainable-parameter gradients in `analytic` (a module of the
/// same structure as `model`) against finite differences of `loss`.
pub fn check_params<M, F>(model: &M, analytic: &M, mut loss: F, opts: &GradCheckOptions) -> GradCheckReport
where
    M: Module<f64> + Clone,
    F: FnMut(&M) -> f64,
{
    let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
    analytic.visit("", &mut |name, role, _, data| {
        if role == TensorRole::Param {
            grads.push((name.to_owned(), data.to_vec()));
        }
    });
    let mut report = GradCheckReport::new();
    let mut work = model.clone();
    let tensors: Vec<_> = describe(model).into_iter().filter(|t| t.1 == TensorRole::Param).collect();
    for (ti, (name, _, _)) in tensors.iter().enumerate() {
        let g = &grads[ti].1;
        for k in coords(g.len(), opts, ti as u64) {
            let mut original = 0.0;
            nudge(&mut work, name, k, |v| {
                original = *v;
                *v += opts.step;
            });
            let plus = loss(&work);
            nudge(&mut work, name, k, |v| *v = original - opts.step);
            let minus = loss(&work);
            nudge(&mut work, name, k, |v| *v = original);
            let numeric = (plus - minus) / (2.0 * opts.step);
            report.record(name, k, g[k], numeric, opts.floor);
        }
    }
    report
}

fn nudge<M: Module<f64>>(m: &mut M, target: &str, k: usize, mut f: impl FnMut(&mut f64)) {
    m.visit_mut("", &mut |name, _, _, data| {
        if name == target {
            f(&mut data[k]);
        }
    });
}

/// Compares an analytic input gradient against finite differences.
pub fn check_input<F>(x: &[f64], analytic: &[f64], mut loss: F, opts: &GradCheckOptions) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let mut report = GradCheckReport::new();
    let mut work = x.to_vec();
    for k in coords(x.len(), opts, u64::MAX) {
        work[k] = x[k] + opts.step;
        let plus = loss(&work);
        work[k] = x[k] - opts.step;
        let minus = loss(&work);
        work[k] = x[k];
        report.record("input", k, analytic[k], (plus - minus) / (2.0 * opts.step), opts.floor);
    }
    report
}
