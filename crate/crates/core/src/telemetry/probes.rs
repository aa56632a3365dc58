//! Measurement probes: gradient cosine similarity, per-layer norms, and
//! frozen-parameter evaluation pauses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envs::EnvSpec;
use crate::error::{config_err, shape_err, Result};
use crate::nn::Network;
use crate::scalar::{dot, l2_norm, Scalar};

use super::metrics::NormRow;

/// Cosine similarities between a full-batch gradient and its halves.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosinePair {
    pub full_half: f64,
    pub half_half: f64,
}

pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let denom = l2_norm(a) * l2_norm(b);
    if denom == T::zero() {
        return 0.0;
    }
    (dot(a, b) / denom).to_f64_lossy().clamp(-1.0, 1.0)
}

/// Cosines for half-batch gradients `g1`, `g2` of a mean-reduced loss, whose
/// full-batch gradient is `(g1 + g2) / 2`.
pub fn cosines_from_halves<T: Scalar>(g1: &[T], g2: &[T]) -> Result<CosinePair> {
    if g1.len() != g2.len() {
        return shape_err("half-batch gradients differ in length");
    }
    let half = T::lit(0.5);
    let full: Vec<T> = g1.iter().zip(g2).map(|(&a, &b)| (a + b) * half).collect();
    Ok(CosinePair {
        full_half: cosine(&full, g1),
        half_half: cosine(g1, g2),
    })
}

/// Splits the sample indices `0..n` into two halves and measures
/// `cos(g_full, g_first)` and `cos(g_first, g_second)`.
///
/// `grad_of` computes a mean-reduced gradient over the given sample indices;
/// `order` lists the indices in split order (first half, then second).
pub fn cosine_probe<T: Scalar>(
    order: &[usize],
    mut grad_of: impl FnMut(&[usize]) -> Result<Vec<T>>,
) -> Result<CosinePair> {
    let n = order.len();
    if n == 0 || n % 2 != 0 {
        return config_err(format!("cosine probe needs an even, nonempty batch (got {n})"));
    }
    let full = grad_of(order)?;
    let g1 = grad_of(&order[..n / 2])?;
    let g2 = grad_of(&order[n / 2..])?;
    if full.len() != g1.len() || g1.len() != g2.len() {
        return shape_err("probe gradients differ in length");
    }
    Ok(CosinePair {
        full_half: cosine(&full, &g1),
        half_half: cosine(&g1, &g2),
    })
}

fn layer_norms<T: Scalar>(net: &Network, v: &[T]) -> Vec<f64> {
    net.layers()
        .iter()
        .map(|l| l2_norm(&v[l.span()]).to_f64_lossy())
        .collect()
}

/// Per-layer norms at one step: rows for each layer in network order, then a
/// `total` row for the whole vector.
pub fn track_norms<T: Scalar>(
    net: &Network,
    params: &[T],
    grad: &[T],
    update_step: &[T],
    step: u64,
    learner: &str,
) -> Vec<NormRow> {
    let mut tracker = NormTracker::new(net);
    tracker.observe(grad, update_step);
    tracker.record(params, step, learner)
}

/// Averages gradient and step norms over a window of updates.
#[derive(Clone, Debug)]
pub struct NormTracker {
    net: Network,
    grad_sum: Vec<f64>,
    step_sum: Vec<f64>,
    count: u64,
}

impl NormTracker {
    pub fn new(net: &Network) -> Self {
        let layers = net.layers().len() + 1;
        NormTracker {
            net: net.clone(),
            grad_sum: vec![0.0; layers],
            step_sum: vec![0.0; layers],
            count: 0,
        }
    }

    pub fn observe<T: Scalar>(&mut self, grad: &[T], update_step: &[T]) {
        let g = layer_norms(&self.net, grad);
        let s = layer_norms(&self.net, update_step);
        let last = g.len();
        for i in 0..last {
            self.grad_sum[i] += g[i];
            self.step_sum[i] += s[i];
        }
        self.grad_sum[last] += l2_norm(grad).to_f64_lossy();
        self.step_sum[last] += l2_norm(update_step).to_f64_lossy();
        self.count += 1;
    }

    pub fn pending(&self) -> u64 {
        self.count
    }

    /// Emits one row per layer plus `total`, then resets the window.
    pub fn record<T: Scalar>(&mut self, params: &[T], step: u64, learner: &str) -> Vec<NormRow> {
        let p = layer_norms(&self.net, params);
        let total = l2_norm(params).to_f64_lossy();
        let names = self
            .net
            .layers()
            .iter()
            .map(|l| l.name.clone())
            .chain(std::iter::once("total".to_string()));
        let c = self.count.max(1) as f64;
        let rows = names
            .enumerate()
            .map(|(i, layer)| NormRow {
                step,
                learner: learner.to_string(),
                layer,
                param_norm: if i < p.len() { p[i] } else { total },
                grad_norm: self.grad_sum[i] / c,
                step_norm: self.step_sum[i] / c,
            })
            .collect();
        self.grad_sum.iter_mut().for_each(|x| *x = 0.0);
        self.step_sum.iter_mut().for_each(|x| *x = 0.0);
        self.count = 0;
        rows
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    /// Mean completed-episode return; `None` when no episode finished.
    pub mean: Option<f64>,
    pub episodes: usize,
    pub steps: usize,
}

/// Runs frozen-policy episodes on one fresh simulator for `eval_steps` steps,
/// cutting episodes at `max_path_len`. Incomplete trailing episodes are
/// discarded; cut episodes count with their partial return.
pub fn eval_pause(
    env: &EnvSpec,
    policy: &mut dyn FnMut(&[f64]) -> Result<usize>,
    eval_steps: usize,
    max_path_len: usize,
    seed: u64,
) -> Result<EvalResult> {
    if max_path_len == 0 {
        return config_err("max_path_len must be >= 1");
    }
    let mut sim = env.build()?;
    let mut obs = sim.reset(seed);
    let (mut total, mut episodes, mut ep_ret, mut ep_len) = (0.0, 0usize, 0.0, 0usize);
    for _ in 0..eval_steps {
        let a = policy(&obs)?;
        let res = sim.step(a)?;
        ep_ret += res.reward;
        ep_len += 1;
        if res.done() || ep_len >= max_path_len {
            total += ep_ret;
            episodes += 1;
            ep_ret = 0.0;
            ep_len = 0;
            obs = sim.reset_next();
        } else {
            obs = res.obs;
        }
    }
    Ok(EvalResult {
        mean: (episodes > 0).then(|| total / episodes as f64),
        episodes,
        steps: eval_steps,
    })
}

/// Epsilon-greedy wrapper around a greedy action function.
pub fn epsilon_policy<'a>(
    mut greedy: impl FnMut(&[f64]) -> Result<usize> + 'a,
    actions: usize,
    epsilon: f64,
    seed: u64,
) -> impl FnMut(&[f64]) -> Result<usize> + 'a {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    move |obs| {
        if epsilon > 0.0 && rng.random::<f64>() < epsilon {
            Ok(rng.random_range(0..actions))
        } else {
            greedy(obs)
        }
    }
}
