//! Value-based targets and losses: (double) DQN regression and the
//! categorical distributional variant.

use crate::error::{config_err, shape_err, Result};
use crate::nn::{GradVector, Head, Network};
use crate::scalar::Scalar;

use super::argmax;

/// Bootstrapped targets `y = R + discount * Q_target(s', a*)`.
///
/// `a*` is the target network's argmax, or the online network's when
/// `q_next_online` is given (double DQN). Rows with zero discount never read
/// their next-state values.
pub fn dqn_targets<T: Scalar>(
    returns: &[T],
    discounts: &[T],
    q_next_target: &[T],
    q_next_online: Option<&[T]>,
    actions: usize,
) -> Result<Vec<T>> {
    let n = returns.len();
    if discounts.len() != n || q_next_target.len() != n * actions {
        return shape_err("dqn target inputs disagree on batch size");
    }
    if q_next_online.is_some_and(|q| q.len() != n * actions) {
        return shape_err("online next-state values have the wrong shape");
    }
    Ok((0..n)
        .map(|i| {
            if discounts[i] == T::zero() {
                return returns[i];
            }
            let span = i * actions..(i + 1) * actions;
            let a = argmax(&q_next_online.unwrap_or(q_next_target)[span.clone()]);
            returns[i] + discounts[i] * q_next_target[span][a]
        })
        .collect())
}

/// Mean squared error `mean_i (y_i - Q(s_i, a_i))^2` and its gradient.
pub fn dqn_loss_grad<T: Scalar>(
    net: &Network,
    params: &[T],
    obs: &[T],
    actions: &[usize],
    targets: &[T],
) -> Result<(T, GradVector<T>)> {
    let Head::Q { actions: na } = net.spec().head else {
        return shape_err("dqn loss needs a Q head");
    };
    let n = actions.len();
    if n == 0 || targets.len() != n {
        return shape_err("one target per action is required");
    }
    if actions.iter().any(|&a| a >= na) {
        return shape_err("action index out of range");
    }
    let cache = net.forward(params, obs, n)?;
    let inv_n = T::one() / T::lit(n as f64);
    let mut loss = T::zero();
    let mut head_grad = vec![T::zero(); n * na];
    for i in 0..n {
        let err = targets[i] - cache.output[i * na + actions[i]];
        loss += err * err * inv_n;
        head_grad[i * na + actions[i]] = -T::lit(2.0) * err * inv_n;
    }
    let grad = net.backward_cached(params, &cache, &head_grad)?;
    Ok((loss, grad))
}

/// Fixed atom locations of a categorical value distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Support<T> {
    atoms: Vec<T>,
}

impl<T: Scalar> Support<T> {
    pub fn new(atoms: Vec<T>) -> Result<Self> {
        if atoms.is_empty() {
            return config_err("support needs at least one atom");
        }
        if atoms.windows(2).any(|w| !(w[0] < w[1])) {
            return config_err("support atoms must be strictly increasing");
        }
        Ok(Support { atoms })
    }

    /// `k` evenly spaced atoms from `v_min` to `v_max` inclusive.
    pub fn uniform(k: usize, v_min: f64, v_max: f64) -> Result<Self> {
        if k < 2 || !(v_min < v_max) {
            return config_err("uniform support needs k >= 2 and v_min < v_max");
        }
        let step = (v_max - v_min) / (k - 1) as f64;
        let mut atoms: Vec<T> = (0..k).map(|i| T::lit(v_min + step * i as f64)).collect();
        atoms[k - 1] = T::lit(v_max);
        Self::new(atoms)
    }

    pub fn atoms(&self) -> &[T] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn min(&self) -> T {
        self.atoms[0]
    }

    pub fn max(&self) -> T {
        self.atoms[self.atoms.len() - 1]
    }
}

/// Projects `r + discount * z` distributions back onto the support.
///
/// Each shifted atom is clamped to `[z_min, z_max]` and its mass split between
/// the two neighboring atoms in proportion to proximity. A zero discount (a
/// terminated row) projects `r` alone.
pub fn categorical_project<T: Scalar>(
    rewards: &[T],
    discounts: &[T],
    next_dist: &[T],
    support: &Support<T>,
) -> Result<Vec<T>> {
    categorical_project_onto(rewards, discounts, next_dist, support, support)
}

/// `categorical_project` with distinct source atoms (where `next_dist` lives)
/// and target grid.
pub fn categorical_project_onto<T: Scalar>(
    rewards: &[T],
    discounts: &[T],
    next_dist: &[T],
    source: &Support<T>,
    target: &Support<T>,
) -> Result<Vec<T>> {
    let n = rewards.len();
    let (ks, k) = (source.len(), target.len());
    if discounts.len() != n || next_dist.len() != n * ks {
        return shape_err("projection inputs disagree on batch size or atom count");
    }
    let z = target.atoms();
    let mut out = vec![T::zero(); n * k];
    for i in 0..n {
        let row_out = &mut out[i * k..(i + 1) * k];
        for (&p, &zj) in next_dist[i * ks..(i + 1) * ks].iter().zip(source.atoms()) {
            let tz = (rewards[i] + discounts[i] * zj).max(target.min()).min(target.max());
            // First atom strictly above tz; tz lies in [z[hi - 1], z[hi]).
            let hi = z.partition_point(|&x| x <= tz);
            if hi == 0 || hi == k || z[hi - 1] == tz {
                row_out[hi.saturating_sub(1).min(k - 1)] += p;
                continue;
            }
            let lo = hi - 1;
            let to_lo = p * (z[hi] - tz) / (z[hi] - z[lo]);
            row_out[lo] += to_lo;
            row_out[hi] += p - to_lo;
        }
    }
    Ok(out)
}

/// Per-action expectations of `L x A x K` distributions.
pub fn expected_q<T: Scalar>(dist: &[T], support: &Support<T>) -> Vec<T> {
    dist.chunks(support.len())
        .map(|row| row.iter().zip(support.atoms()).map(|(&p, &z)| p * z).sum())
        .collect()
}

/// Target distributions for the taken transitions: selects `a*` per row by
/// expected value (of `next_online_dist` when given), then projects.
pub fn catdqn_target_dists<T: Scalar>(
    returns: &[T],
    discounts: &[T],
    next_target_dist: &[T],
    next_online_dist: Option<&[T]>,
    actions: usize,
    support: &Support<T>,
) -> Result<Vec<T>> {
    let n = returns.len();
    let k = support.len();
    if next_target_dist.len() != n * actions * k || next_online_dist.is_some_and(|d| d.len() != n * actions * k) {
        return shape_err("next-state distributions have the wrong shape");
    }
    let q = expected_q(next_online_dist.unwrap_or(next_target_dist), support);
    let mut chosen = Vec::with_capacity(n * k);
    for i in 0..n {
        let a = argmax(&q[i * actions..(i + 1) * actions]);
        let off = (i * actions + a) * k;
        chosen.extend_from_slice(&next_target_dist[off..off + k]);
    }
    categorical_project(returns, discounts, &chosen, support)
}

/// Cross-entropy `-mean_i sum_k m_ik log p_k(s_i, a_i)` and its gradient.
pub fn catdqn_loss_grad<T: Scalar>(
    net: &Network,
    params: &[T],
    obs: &[T],
    actions: &[usize],
    target_dists: &[T],
) -> Result<(T, GradVector<T>)> {
    let Head::QDist { actions: na, atoms: k } = net.spec().head else {
        return shape_err("categorical loss needs a distributional Q head");
    };
    let n = actions.len();
    if n == 0 || target_dists.len() != n * k {
        return shape_err("one target distribution per action is required");
    }
    if actions.iter().any(|&a| a >= na) {
        return shape_err("action index out of range");
    }
    let cache = net.forward(params, obs, n)?;
    let inv_n = T::one() / T::lit(n as f64);
    let mut loss = T::zero();
    let mut head_grad = vec![T::zero(); n * na * k];
    for i in 0..n {
        let off = (i * na + actions[i]) * k;
        let logits = &cache.output[off..off + k];
        let target = &target_dists[i * k..(i + 1) * k];
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = logits.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
        let mass: T = target.iter().copied().sum();
        for j in 0..k {
            let logp = logits[j] - lse;
            loss -= target[j] * logp * inv_n;
            head_grad[off + j] = (mass * logp.exp() - target[j]) * inv_n;
        }
    }
    let grad = net.backward_cached(params, &cache, &head_grad)?;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_diff_grad, NetSpec, ParamVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn terminal_and_bootstrap_targets() {
        let y = dqn_targets(&[1.0, 2.0], &[0.5, 0.0], &[1.0, 3.0, f64::NAN, f64::NAN], None, 2).unwrap();
        assert_eq!(y, vec![2.5, 2.0]);
    }

    #[test]
    fn double_target_uses_online_argmax() {
        // Target prefers action 1 (value 3); online prefers action 0.
        let y = dqn_targets(&[1.0], &[0.5], &[1.0, 3.0], Some(&[9.0, 0.0]), 2).unwrap();
        assert_eq!(y, vec![1.5]);
        let plain = dqn_targets(&[1.0], &[0.5], &[1.0, 3.0], None, 2).unwrap();
        assert_eq!(plain, vec![2.5]);
    }

    fn q_net() -> Network {
        Network::new(NetSpec::dense(3, 4, 1, Head::Q { actions: 3 })).unwrap()
    }

    #[test]
    fn zero_error_zero_gradient_and_masking() {
        let net = q_net();
        let p: ParamVector<f64> = net.init(0);
        let obs = [0.5, -0.5, 0.2];
        let q = net.forward_q(&p, &obs, 1).unwrap();
        let (loss, g) = dqn_loss_grad(&net, &p, &obs, &[1], &[q[1]]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
        let (_, g) = dqn_loss_grad(&net, &p, &obs, &[1], &[q[1] + 1.0]).unwrap();
        let head = net.layers().last().unwrap();
        for a in [0, 2] {
            let w = head.weights.start + a * head.fan_in..head.weights.start + (a + 1) * head.fan_in;
            assert!(g[w].iter().all(|&x| x == 0.0));
            assert_eq!(g[head.bias.start + a], 0.0);
        }
    }

    #[test]
    fn dqn_gradient_matches_finite_differences() {
        let net = q_net();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for seed in 0..10 {
            let p: ParamVector<f64> = net.init(seed);
            let obs: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let acts = [0, 2, 1];
            let y = [0.3, -1.0, 2.0];
            let (_, g) = dqn_loss_grad(&net, &p, &obs, &acts, &y).unwrap();
            let fd = finite_diff_grad(&p, |t| dqn_loss_grad(&net, t, &obs, &acts, &y).unwrap().0, 1e-6);
            for (a, b) in g.iter().zip(fd.iter()) {
                assert!((a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-4), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn support_validation() {
        assert!(Support::<f64>::new(vec![]).is_err());
        assert!(Support::new(vec![0.0, 0.0]).is_err());
        assert!(Support::new(vec![1.0]).is_ok());
        let s = Support::<f64>::uniform(5, -1.0, 1.0).unwrap();
        assert_eq!(s.atoms(), &[-1.0, -0.5, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn identity_projection() {
        let s = Support::<f64>::uniform(5, -2.0, 2.0).unwrap();
        let d = [0.1, 0.2, 0.3, 0.25, 0.15];
        let out = categorical_project(&[0.0], &[1.0], &d, &s).unwrap();
        assert_eq!(out, d.to_vec());
    }

    #[test]
    fn done_row_beyond_max_goes_to_last_atom() {
        let s = Support::<f64>::uniform(4, 0.0, 3.0).unwrap();
        let out = categorical_project(&[10.0], &[0.0], &[0.5, 0.25, 0.125, 0.125], &s).unwrap();
        assert_eq!(out, vec![0.0, 0.0, 0.0, 1.0]);
        let out = categorical_project(&[1.25], &[0.0], &[0.4, 0.3, 0.2, 0.1], &s).unwrap();
        assert!((out[1] - 0.75).abs() < 1e-15 && (out[2] - 0.25).abs() < 1e-15);
    }

    /// Transport by hat kernels centred on each atom; handles uneven spacing.
    fn hat_oracle(r: f64, disc: f64, p: &[f64], z: &[f64]) -> Vec<f64> {
        let k = z.len();
        let mut out = vec![0.0; k];
        for (j, &pj) in p.iter().enumerate() {
            let tz = (r + disc * z[j]).clamp(z[0], z[k - 1]);
            for (a, o) in out.iter_mut().enumerate() {
                let w = if tz >= z[a] {
                    if a + 1 < k { (1.0 - (tz - z[a]) / (z[a + 1] - z[a])).max(0.0) } else { (tz == z[a]) as u8 as f64 }
                } else if a > 0 {
                    (1.0 - (z[a] - tz) / (z[a] - z[a - 1])).max(0.0)
                } else {
                    0.0
                };
                *o += pj * w;
            }
        }
        out
    }

    fn random_case(rng: &mut ChaCha8Rng, k: usize) -> (Vec<f64>, Vec<f64>, f64, f64) {
        let mut z: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
        z.sort_by(f64::total_cmp);
        z.dedup();
        let raw: Vec<f64> = (0..z.len()).map(|_| rng.random::<f64>() + 1e-3).collect();
        let s: f64 = raw.iter().sum();
        let p = raw.iter().map(|x| x / s).collect();
        let disc = if rng.random::<f64>() < 0.2 { 0.0 } else { rng.random_range(0.0..1.0) };
        (z, p, rng.random_range(-3.0..3.0), disc)
    }

    #[test]
    fn projection_matches_transport_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let k = rng.random_range(2..=7);
            let (z, p, r, disc) = random_case(&mut rng, k);
            let s = Support::new(z.clone()).unwrap();
            let out = categorical_project(&[r], &[disc], &p, &s).unwrap();
            let want = hat_oracle(r, disc, &p, &z);
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{out:?} vs {want:?}");
            }
            assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn projection_is_translation_consistent(
            seed in 0u64..10_000,
            shift in -0.4f64..0.4,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.random_range(2..=7);
            let s = Support::<f64>::uniform(k, -1.0, 1.0).unwrap();
            let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
            let tot: f64 = raw.iter().sum();
            // Keep mass off the edge atoms so shifting never clamps.
            let mut p: Vec<f64> = raw.iter().map(|x| x / tot).collect();
            p[0] = 0.0;
            p[k - 1] = 0.0;
            let m: f64 = p.iter().sum();
            prop_assume!(m > 0.0);
            p.iter_mut().for_each(|x| *x /= m);
            prop_assume!(shift.abs() < 2.0 / (k - 1) as f64);
            let a = categorical_project(&[shift], &[1.0], &p, &s).unwrap();
            let moved = Support::new(s.atoms().iter().map(|z| z - shift).collect()).unwrap();
            let b = categorical_project_onto(&[0.0], &[1.0], &p, &s, &moved).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn projection_conserves_mass(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.random_range(1..=9);
            let (z, p, r, disc) = random_case(&mut rng, k);
            let s = Support::new(z).unwrap();
            let out = categorical_project(&[r], &[disc], &p, &s).unwrap();
            prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(out.iter().all(|&x| x >= 0.0));
        }
    }

    fn dist_net() -> Network {
        Network::new(NetSpec::dense(2, 4, 1, Head::QDist { actions: 2, atoms: 3 })).unwrap()
    }

    #[test]
    fn catdqn_gradient_matches_finite_differences() {
        let net = dist_net();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..10 {
            let p: ParamVector<f64> = net.init(seed);
            let obs: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let acts = [1, 0];
            let m = [0.2, 0.5, 0.3, 0.0, 0.9, 0.1];
            let (_, g) = catdqn_loss_grad(&net, &p, &obs, &acts, &m).unwrap();
            let fd = finite_diff_grad(&p, |t| catdqn_loss_grad(&net, t, &obs, &acts, &m).unwrap().0, 1e-6);
            for (a, b) in g.iter().zip(fd.iter()) {
                assert!((a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-4), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn target_equal_to_prediction_is_stationary() {
        let net = dist_net();
        let p: ParamVector<f64> = net.init(2);
        let obs = [0.3, -0.7];
        let d = net.forward_q_dist(&p, &obs, 1).unwrap();
        let (_, g) = catdqn_loss_grad(&net, &p, &obs, &[1], &d[3..6]).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn uniform_target_two_atoms() {
        // Single-atom-pair head with zero hidden influence: logits are the
        // head biases. Loss = -(log p0 + log p1) / 2.
        let net = Network::new(NetSpec::dense(1, 1, 1, Head::QDist { actions: 1, atoms: 2 })).unwrap();
        let mut p: ParamVector<f64> = net.init(0);
        let head = net.layers().last().unwrap().clone();
        p[head.weights.clone()].iter_mut().for_each(|w| *w = 0.0);
        p[head.bias.start] = 1.0;
        p[head.bias.start + 1] = 0.0;
        let (loss, g) = catdqn_loss_grad(&net, &p, &[0.0], &[0], &[0.5, 0.5]).unwrap();
        let p0 = 1.0 / (1.0 + (-1.0f64).exp());
        let want = -0.5 * (p0.ln() + (1.0 - p0).ln());
        assert!((loss - want).abs() < 1e-14);
        assert!((g[head.bias.start] - (p0 - 0.5)).abs() < 1e-14);
        assert!((g[head.bias.start + 1] - (0.5 - p0)).abs() < 1e-14);
    }

    #[test]
    fn double_catdqn_selects_by_online_expectation() {
        let s = Support::<f64>::uniform(2, 0.0, 1.0).unwrap();
        // Target: action 0 -> all on 1.0, action 1 -> all on 0.0.
        let tgt = [0.0, 1.0, 1.0, 0.0];
        let online = [1.0, 0.0, 0.0, 1.0];
        let plain = catdqn_target_dists(&[0.0], &[1.0], &tgt, None, 2, &s).unwrap();
        assert_eq!(plain, vec![0.0, 1.0]);
        let dbl = catdqn_target_dists(&[0.0], &[1.0], &tgt, Some(&online), 2, &s).unwrap();
        assert_eq!(dbl, vec![1.0, 0.0]);
    }
}
