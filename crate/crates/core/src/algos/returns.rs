use crate::error::{shape_err, Result};
use crate::sampler::SampleBatch;
use crate::scalar::Scalar;

/// Discounted returns over a `horizon x batch` block, computed backwards from
/// `bootstrap` (one value per column).
///
/// A terminated step contributes no bootstrap. A truncated step bootstraps
/// from `next_values[i]`, the value of the state the episode was cut at;
/// `next_values` is only read at truncated entries.
#[allow(clippy::too_many_arguments)]
pub fn discounted_returns<T: Scalar>(
    rewards: &[T],
    terminated: &[bool],
    truncated: &[bool],
    next_values: &[T],
    bootstrap: &[T],
    horizon: usize,
    batch: usize,
    gamma: T,
) -> Result<Vec<T>> {
    let n = horizon * batch;
    if rewards.len() != n || terminated.len() != n || truncated.len() != n || next_values.len() != n {
        return shape_err("returns inputs must all have horizon x batch entries");
    }
    if bootstrap.len() != batch {
        return shape_err("bootstrap needs one value per column");
    }
    let mut out = vec![T::zero(); n];
    let mut running = bootstrap.to_vec();
    for t in (0..horizon).rev() {
        for c in 0..batch {
            let i = t * batch + c;
            let next = if terminated[i] {
                T::zero()
            } else if truncated[i] {
                next_values[i]
            } else {
                running[c]
            };
            running[c] = rewards[i] + gamma * next;
            out[i] = running[c];
        }
    }
    Ok(out)
}

/// Returns `R_t` and advantages `A_t = R_t - V(s_t)` for a sampled horizon.
///
/// `truncation_values` holds one value per entry of `batch.truncation_obs`.
pub fn compute_returns_advantages(
    batch: &SampleBatch,
    bootstrap_values: &[f64],
    truncation_values: &[f64],
    gamma: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let Some(values) = batch.values.as_ref() else {
        return shape_err("sample batch carries no value estimates");
    };
    if truncation_values.len() != batch.truncation_obs.len() {
        return shape_err("one truncation value per truncated step is required");
    }
    let mut next_values = vec![0.0; batch.len()];
    for (e, &v) in batch.truncation_obs.iter().zip(truncation_values) {
        next_values[e.t * batch.batch + e.column] = v;
    }
    let returns = discounted_returns(
        &batch.rewards,
        &batch.terminated,
        &batch.truncated,
        &next_values,
        bootstrap_values,
        batch.horizon,
        batch.batch,
        gamma,
    )?;
    let adv = returns.iter().zip(values).map(|(r, v)| r - v).collect();
    Ok((returns, adv))
}
