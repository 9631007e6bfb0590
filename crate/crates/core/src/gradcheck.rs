//! Central finite-difference checks of analytic parameter gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{ParamStore, Tensor};

/// Relative error `|a - n| / max(|a|, |n|, floor)`; the floor keeps vanishing
/// gradients from being judged on round-off.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst: Option<GradMismatch>,
    /// Probes whose stencil crossed a non-differentiable point.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.skipped * 4 <= self.checked && self.max_relative_error < tolerance
    }
}

/// Compares `analytic` (one tensor per store slot) against central differences
/// of `loss` for up to `per_tensor` seeded entries of every tensor whose name
/// satisfies `select`.
pub fn check_param_grads<F>(
    params: &ParamStore,
    analytic: &[Tensor],
    loss: F,
    per_tensor: usize,
    step: f64,
    seed: u64,
    select: impl Fn(&str) -> bool,
) -> GradCheckReport
where
    F: Fn(&ParamStore) -> f64,
{
    check_impl(params, analytic, |p| (loss(p), 0), per_tensor, step, seed, select)
}

/// As [`check_param_grads`] for piecewise-smooth losses. `loss` also returns a
/// signature of the active piece (e.g. [`crate::nn::Graph::relu_signature`]);
/// probes whose stencil leaves the piece of the unperturbed point are counted
/// as skipped instead of compared.
pub fn check_param_grads_piecewise<F>(
    params: &ParamStore,
    analytic: &[Tensor],
    loss: F,
    per_tensor: usize,
    step: f64,
    seed: u64,
    select: impl Fn(&str) -> bool,
) -> GradCheckReport
where
    F: Fn(&ParamStore) -> (f64, u64),
{
    check_impl(params, analytic, loss, per_tensor, step, seed, select)
}

fn check_impl<F>(
    params: &ParamStore,
    analytic: &[Tensor],
    loss: F,
    per_tensor: usize,
    step: f64,
    seed: u64,
    select: impl Fn(&str) -> bool,
) -> GradCheckReport
where
    F: Fn(&ParamStore) -> (f64, u64),
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let (_, base) = loss(params);
    let mut probe = params.clone();
    for id in params.ids() {
        let name = params.name(id).to_string();
        if !select(&name) {
            continue;
        }
        let n = params.get(id).len();
        let picks = sample(&mut rng, n, per_tensor.min(n));
        for j in picks.iter() {
            let orig = params.get(id).data[j];
            probe.get_mut(id).data[j] = orig + step;
            let (up, sig_up) = loss(&probe);
            probe.get_mut(id).data[j] = orig - step;
            let (down, sig_down) = loss(&probe);
            probe.get_mut(id).data[j] = orig;
            if sig_up != base || sig_down != base {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[id.index()].data[j];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some(GradMismatch {
                    param: name.clone(),
                    index: j,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    report
}

pub fn numeric_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}
