use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NumericsError, ParamStore};

/// Compares the analytic gradients already present in `params`' gradient
/// buffers against central finite differences of `loss_fn`.
///
/// For each parameter, up to `samples_per_param` coordinates are chosen by
/// the seeded RNG (all coordinates when the budget covers them). Returns
/// the maximum relative error with denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(
    params: &mut ParamStore,
    eps: f64,
    samples_per_param: usize,
    seed: u64,
    mut loss_fn: F,
) -> Result<f64, NumericsError>
where
    F: FnMut(&ParamStore) -> f64,
{
    assert!(
        (1e-7..=1e-3).contains(&eps),
        "finite-difference step {eps} outside [1e-7, 1e-3]"
    );
    let base = loss_fn(params);
    let again = loss_fn(params);
    if base.to_bits() != again.to_bits() {
        return Err(NumericsError::NonDeterministicLoss(base, again));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys: Vec<String> = params.keys().map(str::to_string).collect();
    let mut max_rel = 0.0f64;
    for key in keys {
        let numel = params.get(&key)?.numel();
        let picked: Vec<usize> = if samples_per_param >= numel {
            (0..numel).collect()
        } else {
            let mut idx = sample(&mut rng, numel, samples_per_param).into_vec();
            idx.sort_unstable();
            idx
        };
        for i in picked {
            let original = params.get(&key)?.data()[i];
            params.get_mut(&key)?.data_mut()[i] = original + eps;
            let plus = loss_fn(params);
            params.get_mut(&key)?.data_mut()[i] = original - eps;
            let minus = loss_fn(params);
            params.get_mut(&key)?.data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = params.grad(&key)?.data()[i];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(max_rel)
}
