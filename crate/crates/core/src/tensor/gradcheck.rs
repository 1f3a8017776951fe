use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Grads, ParamStore};
use super::TensorError;

/// Denominator floor for the relative error, so entries whose true gradient
/// is zero are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compares analytic gradients from `f` with central differences of step
/// `step`. Parameters are perturbed in place and restored bit-exactly.
///
/// With `sample = Some((k, seed))` at most `k` entries per tensor are
/// checked, chosen by `seed`; otherwise every entry is.
pub fn grad_check<F>(
    store: &mut ParamStore,
    step: f64,
    sample_per_tensor: Option<(usize, u64)>,
    mut f: F,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&ParamStore) -> Result<(f64, Grads), TensorError>,
{
    let (_, grads) = f(store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_per_tensor.map_or(0, |s| s.1));
    let mut report = GradCheckReport {
        checked: 0,
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let len = store.get(id).len();
        let indices: Vec<usize> = match sample_per_tensor {
            Some((k, _)) if k < len => sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        for i in indices {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + step;
            let plus = f(store)?.0;
            store.get_mut(id).data_mut()[i] = orig - step;
            let minus = f(store)?.0;
            store.get_mut(id).data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let analytic = grads.get(id).data()[i];
            let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
            let rel = (analytic - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_relative_error || report.worst_param.is_empty() {
                report.max_relative_error = rel;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
