use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParamStore};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is essentially zero are compared in absolute terms.
    pub floor: f64,
    /// Above this many coordinates a random 1% subsample is checked.
    pub subsample_above: usize,
    pub seed: u64,
    /// Smaller steps tried, in order, for a coordinate whose error exceeds
    /// `retry_above`; the smallest error found is kept. A ReLU kink lying
    /// within `step` of the current point spoils one central difference but
    /// not those with a smaller step, whereas a wrong gradient disagrees at
    /// every step.
    pub fallback_steps: Vec<f64>,
    pub retry_above: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-8,
            subsample_above: 10_000,
            seed: 0,
            fallback_steps: Vec::new(),
            retry_above: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares `analytic` with central finite differences of `loss` on every
/// parameter coordinate (or a 1% sample for large models). The relative
/// error of a coordinate is `|a − n| / max(|a|, |n|, floor)`. Parameters are
/// restored before returning.
pub fn grad_check<F>(store: &mut ParamStore, analytic: &Gradients, mut loss: F, opts: &GradCheckOptions) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
{
    let coords: Vec<(usize, usize)> = store
        .params()
        .iter()
        .enumerate()
        .flat_map(|(p, param)| (0..param.value.len()).map(move |j| (p, j)))
        .collect();
    let chosen: Vec<(usize, usize)> = if coords.len() > opts.subsample_above {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let k = (coords.len() / 100).max(1);
        sample(&mut rng, coords.len(), k).into_iter().map(|i| coords[i]).collect()
    } else {
        coords
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: chosen.len(),
    };
    for (p, j) in chosen {
        let a = analytic.0[p][j];
        let mut central = |h: f64, store: &mut ParamStore| {
            let orig = store.params()[p].value.data[j];
            store.params_mut()[p].value.data[j] = orig + h;
            let up = loss(store);
            store.params_mut()[p].value.data[j] = orig - h;
            let down = loss(store);
            store.params_mut()[p].value.data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            (if err.is_nan() { f64::INFINITY } else { err }, numeric)
        };
        let (mut err, mut numeric) = central(opts.step, store);
        for &h in &opts.fallback_steps {
            if err <= opts.retry_above {
                break;
            }
            let (e, n) = central(h, store);
            if e < err {
                (err, numeric) = (e, n);
            }
        }
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_param = store.params()[p].name.clone();
            report.worst_index = j;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report
}
