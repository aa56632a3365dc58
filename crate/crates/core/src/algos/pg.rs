//! Actor-critic objectives.
//!
//! Both A2C and PPO minimize
//! `policy_loss + value_coef * (R - V)^2 - entropy_coef * H(pi)`, averaged over
//! the batch. A2C's policy loss is `-log pi(a|s) * A`; PPO's is
//! `-min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)` with
//! `rho = pi(a|s) / pi_old(a|s)`.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{config_err, shape_err, Result};
use crate::nn::{GradVector, Head, Network};
use crate::scalar::{l2_norm, Scalar};

use super::PpoConfig;

/// Per-sample training data for a policy-value network.
#[derive(Clone, Copy, Debug)]
pub struct PgSamples<'a, T> {
    /// `len x obs_dim`.
    pub obs: &'a [T],
    pub actions: &'a [usize],
    pub returns: &'a [T],
    pub advantages: &'a [T],
    /// Log-probabilities of `actions` under the acting policy (PPO only).
    pub old_logprobs: Option<&'a [T]>,
}

impl<T> PgSamples<'_, T> {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PgCoefs {
    pub entropy_coef: f64,
    pub value_coef: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PgLossStats<T> {
    pub total: T,
    pub policy: T,
    pub value: T,
    pub entropy: T,
    /// Fraction of samples whose clipped branch was selected (PPO).
    pub clip_fraction: T,
}

/// Loss and exact gradient. `clip = None` gives the A2C objective, `Some(eps)`
/// the clipped PPO surrogate (requires `old_logprobs`).
pub fn pg_loss_grad<T: Scalar>(
    net: &Network,
    params: &[T],
    samples: &PgSamples<'_, T>,
    coefs: PgCoefs,
    clip: Option<T>,
) -> Result<(PgLossStats<T>, GradVector<T>)> {
    let Head::PolicyValue { actions } = net.spec().head else {
        return shape_err("policy-gradient losses need a policy-value head");
    };
    let n = samples.len();
    if n == 0 {
        return shape_err("empty sample set");
    }
    if samples.returns.len() != n || samples.advantages.len() != n {
        return shape_err("returns/advantages must match the number of actions");
    }
    if clip.is_some() && samples.old_logprobs.is_none_or(|o| o.len() != n) {
        return shape_err("clipped objective needs one old log-probability per sample");
    }
    if let Some(&a) = samples.actions.iter().find(|&&a| a >= actions) {
        return shape_err(format!("action {a} out of range for {actions} actions"));
    }
    let cache = net.forward(params, samples.obs, n)?;
    let out_dim = actions + 1;
    let inv_n = T::one() / T::lit(n as f64);
    let (ec, vc) = (T::lit(coefs.entropy_coef), T::lit(coefs.value_coef));
    let two = T::lit(2.0);
    let mut stats = PgLossStats::default();
    let mut head_grad = vec![T::zero(); n * out_dim];
    let mut logp = vec![T::zero(); actions];
    for r in 0..n {
        let row = &cache.output[r * out_dim..(r + 1) * out_dim];
        let logits = &row[..actions];
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
        for (lp, &z) in logp.iter_mut().zip(logits) {
            *lp = z - lse;
        }
        let entropy = -logp.iter().map(|&l| l.exp() * l).sum::<T>();
        let a = samples.actions[r];
        let adv = samples.advantages[r];
        let g = &mut head_grad[r * out_dim..(r + 1) * out_dim];

        // d(policy loss)/d(logp_a); the logit gradient is this times (1[j=a] - p_j).
        let (policy_loss, dlogp_a) = match clip {
            None => (-logp[a] * adv, -adv),
            Some(eps) => {
                let old = samples.old_logprobs.expect("checked above")[r];
                let rho = (logp[a] - old).exp();
                let unclipped = rho * adv;
                let clipped = rho.max(T::one() - eps).min(T::one() + eps) * adv;
                if unclipped <= clipped {
                    (-unclipped, -adv * rho)
                } else {
                    stats.clip_fraction += inv_n;
                    (-clipped, T::zero())
                }
            }
        };
        for j in 0..actions {
            let p = logp[j].exp();
            let ind = if j == a { T::one() } else { T::zero() };
            g[j] = (dlogp_a * (ind - p) + ec * p * (logp[j] + entropy)) * inv_n;
        }
        let err = samples.returns[r] - row[actions];
        g[actions] = -two * vc * err * inv_n;

        stats.policy += policy_loss * inv_n;
        stats.value += err * err * inv_n;
        stats.entropy += entropy * inv_n;
    }
    stats.total = stats.policy + vc * stats.value - ec * stats.entropy;
    let grad = net.backward_cached(params, &cache, &head_grad)?;
    Ok((stats, grad))
}

pub fn a2c_loss_grad<T: Scalar>(
    net: &Network,
    params: &[T],
    samples: &PgSamples<'_, T>,
    coefs: PgCoefs,
) -> Result<(PgLossStats<T>, GradVector<T>)> {
    pg_loss_grad(net, params, samples, coefs, None)
}

pub fn ppo_loss_grad<T: Scalar>(
    net: &Network,
    params: &[T],
    samples: &PgSamples<'_, T>,
    coefs: PgCoefs,
    clip: f64,
) -> Result<(PgLossStats<T>, GradVector<T>)> {
    pg_loss_grad(net, params, samples, coefs, Some(T::lit(clip)))
}

/// Rescales `grad` to norm `max_norm` if it is longer. Returns the original norm.
pub fn clip_grad_norm<T: Scalar>(grad: &mut [T], max_norm: f64) -> T {
    let norm = l2_norm(grad);
    let max = T::lit(max_norm);
    if norm > max {
        let scale = max / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PpoUpdateStats {
    pub updates: usize,
    /// Samples fed through gradient computations (counts re-use).
    pub samples_used: usize,
    pub mean_loss: f64,
    pub mean_clip_fraction: f64,
}

/// `epochs x minibatches` clipped-objective updates over one sampled batch.
/// Minibatches are disjoint shuffled partitions, redrawn every epoch.
///
/// `apply` receives each minibatch gradient and must update `params`.
pub fn ppo_update<T: Scalar, R: Rng>(
    net: &Network,
    params: &mut [T],
    samples: &PgSamples<'_, T>,
    config: &PpoConfig,
    coefs: PgCoefs,
    rng: &mut R,
    mut apply: impl FnMut(&mut [T], &GradVector<T>) -> Result<()>,
) -> Result<PpoUpdateStats> {
    let n = samples.len();
    if config.minibatches == 0 || n % config.minibatches != 0 {
        return config_err(format!(
            "{} minibatches do not evenly divide a batch of {n}",
            config.minibatches
        ));
    }
    let old = samples
        .old_logprobs
        .ok_or_else(|| crate::error::Error::Shape("ppo needs old log-probabilities".into()))?;
    let mb = n / config.minibatches;
    let dim = net.input_dim();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut stats = PpoUpdateStats::default();
    let (mut obs, mut acts, mut rets, mut advs, mut olds) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..config.epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(mb) {
            obs.clear();
            acts.clear();
            rets.clear();
            advs.clear();
            olds.clear();
            for &i in chunk {
                obs.extend_from_slice(&samples.obs[i * dim..(i + 1) * dim]);
                acts.push(samples.actions[i]);
                rets.push(samples.returns[i]);
                advs.push(samples.advantages[i]);
                olds.push(old[i]);
            }
            if config.normalize_advantages && mb > 1 {
                normalize(&mut advs);
            }
            let mini = PgSamples {
                obs: &obs,
                actions: &acts,
                returns: &rets,
                advantages: &advs,
                old_logprobs: Some(&olds),
            };
            let (loss, mut grad) = ppo_loss_grad(net, params, &mini, coefs, config.clip)?;
            if let Some(max) = config.max_grad_norm {
                clip_grad_norm(&mut grad, max);
            }
            apply(params, &grad)?;
            stats.updates += 1;
            stats.samples_used += chunk.len();
            stats.mean_loss += loss.total.to_f64_lossy();
            stats.mean_clip_fraction += loss.clip_fraction.to_f64_lossy();
        }
    }
    stats.mean_loss /= stats.updates as f64;
    stats.mean_clip_fraction /= stats.updates as f64;
    Ok(stats)
}

/// Shifts and scales to zero mean, unit standard deviation.
pub fn normalize<T: Scalar>(xs: &mut [T]) {
    let n = T::lit(xs.len() as f64);
    let mean = xs.iter().copied().sum::<T>() / n;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let std = var.sqrt() + T::lit(1e-8);
    for x in xs.iter_mut() {
        *x = (*x - mean) / std;
    }
}
