//! Experience replay organized by simulator.
//!
//! Each simulator owns a ring segment of `total_capacity / num_sims`
//! transitions, so every segment is one contiguous trajectory stream and
//! n-step windows never straddle two simulators.

use rand::Rng;

use crate::error::{config_err, shape_err, Error, Result};
use crate::sampler::SampleBatch;

/// One environment step as seen by the replay buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    /// Observation the episode was cut at; required when `truncated`.
    pub final_obs: Option<Vec<f64>>,
}

/// Assembled n-step minibatch.
///
/// Target: `returns[i] + discounts[i] * V(next_obs[i])`; `discounts[i]` is 0
/// when the window hit a termination.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NStepBatch {
    pub len: usize,
    pub obs_dim: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<usize>,
    pub returns: Vec<f64>,
    pub discounts: Vec<f64>,
    pub next_obs: Vec<f64>,
    /// `(sim, absolute index)` of each sampled start transition.
    pub sources: Vec<(usize, u64)>,
}

#[derive(Clone, Debug)]
struct Segment {
    obs: Vec<f64>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    terminated: Vec<bool>,
    truncated: Vec<bool>,
    final_obs: Vec<Option<Vec<f64>>>,
    /// Transitions ever appended; slot of absolute index `i` is `i % cap`.
    count: u64,
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    obs_dim: usize,
    seg_cap: usize,
    min_history: usize,
    segments: Vec<Segment>,
    appended: u64,
    sampled: u64,
}

impl ReplayBuffer {
    pub fn new(total_capacity: usize, num_sims: usize, obs_dim: usize) -> Result<Self> {
        if num_sims == 0 || obs_dim == 0 {
            return config_err("replay needs at least one simulator and a nonzero observation size");
        }
        let seg_cap = total_capacity / num_sims;
        if seg_cap < 2 {
            return config_err(format!(
                "replay capacity {total_capacity} leaves fewer than 2 slots for each of {num_sims} simulators"
            ));
        }
        let seg = Segment {
            obs: vec![0.0; seg_cap * obs_dim],
            actions: vec![0; seg_cap],
            rewards: vec![0.0; seg_cap],
            terminated: vec![false; seg_cap],
            truncated: vec![false; seg_cap],
            final_obs: vec![None; seg_cap],
            count: 0,
        };
        Ok(ReplayBuffer {
            obs_dim,
            seg_cap,
            min_history: 1,
            segments: vec![seg; num_sims],
            appended: 0,
            sampled: 0,
        })
    }

    /// Sampling fails until at least `min` valid start transitions exist.
    pub fn with_min_history(mut self, min: usize) -> Self {
        self.min_history = min.max(1);
        self
    }

    pub fn num_sims(&self) -> usize {
        self.segments.len()
    }

    pub fn segment_capacity(&self) -> usize {
        self.seg_cap
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    /// Transitions currently held by `sim`.
    pub fn segment_len(&self, sim: usize) -> usize {
        (self.segments[sim].count as usize).min(self.seg_cap)
    }

    pub fn len(&self) -> usize {
        (0..self.num_sims()).map(|s| self.segment_len(s)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.appended == 0
    }

    pub fn appended(&self) -> u64 {
        self.appended
    }

    /// Transitions handed out by `sample`, counting repeats.
    pub fn sampled(&self) -> u64 {
        self.sampled
    }

    pub fn append(&mut self, sim: usize, t: &Transition) -> Result<()> {
        if sim >= self.segments.len() {
            return shape_err(format!("simulator {sim} out of range"));
        }
        if t.obs.len() != self.obs_dim {
            return shape_err("transition observation has the wrong size");
        }
        if t.truncated && t.final_obs.as_ref().is_none_or(|o| o.len() != self.obs_dim) {
            return shape_err("truncated transition needs its final observation");
        }
        let d = self.obs_dim;
        let seg = &mut self.segments[sim];
        let slot = (seg.count % self.seg_cap as u64) as usize;
        seg.obs[slot * d..(slot + 1) * d].copy_from_slice(&t.obs);
        seg.actions[slot] = t.action;
        seg.rewards[slot] = t.reward;
        seg.terminated[slot] = t.terminated;
        seg.truncated[slot] = t.truncated && !t.terminated;
        seg.final_obs[slot] = if seg.truncated[slot] { t.final_obs.clone() } else { None };
        seg.count += 1;
        self.appended += 1;
        Ok(())
    }

    /// Appends every step of a sampled horizon; column `c` feeds segment `c`.
    pub fn append_batch(&mut self, batch: &SampleBatch) -> Result<()> {
        if batch.batch != self.num_sims() || batch.obs_dim != self.obs_dim {
            return shape_err("sample batch does not match the replay layout");
        }
        let mut finals = std::collections::HashMap::new();
        for e in &batch.truncation_obs {
            finals.insert((e.t, e.column), e.obs.clone());
        }
        for t in 0..batch.horizon {
            for c in 0..batch.batch {
                let i = t * batch.batch + c;
                self.append(
                    c,
                    &Transition {
                        obs: batch.obs_at(t, c).to_vec(),
                        action: batch.actions[i],
                        reward: batch.rewards[i],
                        terminated: batch.terminated[i],
                        truncated: batch.truncated[i],
                        final_obs: finals.remove(&(t, c)),
                    },
                )?;
            }
        }
        Ok(())
    }

    fn slot(&self, i: u64) -> usize {
        (i % self.seg_cap as u64) as usize
    }

    fn ends_episode(seg: &Segment, slot: usize) -> bool {
        seg.terminated[slot] || seg.truncated[slot]
    }

    /// Valid starts of `sim` as a contiguous range `[oldest, last_full]` plus a
    /// short tail of recent starts whose window closes with an episode end.
    fn valid_starts(&self, sim: usize, n: usize) -> (u64, u64, Vec<u64>) {
        let seg = &self.segments[sim];
        let oldest = seg.count.saturating_sub(self.seg_cap as u64);
        // Every start with i + n <= count - 1 has its whole window and the
        // bootstrap observation in storage.
        let full_end = seg.count.saturating_sub(n as u64).max(oldest);
        let mut tail = Vec::new();
        for i in full_end..seg.count {
            let closes = (i..seg.count).any(|j| Self::ends_episode(seg, self.slot(j)));
            if closes {
                tail.push(i);
            }
        }
        (oldest, full_end, tail)
    }

    /// Number of start transitions `sample` can currently draw from.
    pub fn valid_count(&self, n_step: usize) -> usize {
        (0..self.num_sims())
            .map(|s| {
                let (lo, hi, tail) = self.valid_starts(s, n_step);
                (hi - lo) as usize + tail.len()
            })
            .sum()
    }

    /// Draws `batch_size` n-step transitions with replacement, uniformly over
    /// valid `(sim, index)` pairs.
    pub fn sample<R: Rng>(&mut self, batch_size: usize, n_step: usize, gamma: f64, rng: &mut R) -> Result<NStepBatch> {
        let out = self.sample_readonly(batch_size, n_step, gamma, rng)?;
        self.sampled += batch_size as u64;
        Ok(out)
    }

    /// `sample` without touching the consumption counter; for extra readers.
    pub fn sample_readonly<R: Rng>(
        &self,
        batch_size: usize,
        n_step: usize,
        gamma: f64,
        rng: &mut R,
    ) -> Result<NStepBatch> {
        if n_step == 0 || batch_size == 0 {
            return config_err("n_step and batch size must be >= 1");
        }
        if n_step >= self.seg_cap {
            return config_err("n_step must be shorter than each replay segment");
        }
        let per_sim: Vec<_> = (0..self.num_sims()).map(|s| self.valid_starts(s, n_step)).collect();
        let sizes: Vec<u64> = per_sim.iter().map(|(lo, hi, t)| hi - lo + t.len() as u64).collect();
        let total: u64 = sizes.iter().sum();
        if (total as usize) < self.min_history {
            return Err(Error::InsufficientHistory {
                have: total as usize,
                need: self.min_history,
            });
        }
        let d = self.obs_dim;
        let mut out = NStepBatch {
            len: batch_size,
            obs_dim: d,
            ..Default::default()
        };
        for _ in 0..batch_size {
            let mut u = rng.random_range(0..total);
            let mut sim = 0;
            while u >= sizes[sim] {
                u -= sizes[sim];
                sim += 1;
            }
            let (lo, hi, tail) = &per_sim[sim];
            let start = if u < hi - lo { lo + u } else { tail[(u - (hi - lo)) as usize] };
            self.assemble(sim, start, n_step, gamma, &mut out);
        }
        Ok(out)
    }

    fn assemble(&self, sim: usize, start: u64, n: usize, gamma: f64, out: &mut NStepBatch) {
        let d = self.obs_dim;
        let seg = &self.segments[sim];
        let s0 = self.slot(start);
        out.obs.extend_from_slice(&seg.obs[s0 * d..(s0 + 1) * d]);
        out.actions.push(seg.actions[s0]);
        out.sources.push((sim, start));
        let mut ret = 0.0;
        let mut disc = 1.0;
        for k in 0..n {
            let s = self.slot(start + k as u64);
            ret += disc * seg.rewards[s];
            disc *= gamma;
            if seg.terminated[s] {
                out.returns.push(ret);
                out.discounts.push(0.0);
                out.next_obs.extend(std::iter::repeat_n(0.0, d));
                return;
            }
            if seg.truncated[s] {
                out.returns.push(ret);
                out.discounts.push(disc);
                out.next_obs.extend_from_slice(seg.final_obs[s].as_ref().expect("checked on append"));
                return;
            }
        }
        let s = self.slot(start + n as u64);
        out.returns.push(ret);
        out.discounts.push(disc);
        out.next_obs.extend_from_slice(&seg.obs[s * d..(s + 1) * d]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(x: f64, done: bool) -> Transition {
        Transition {
            obs: vec![x],
            action: x as usize % 3,
            reward: x,
            terminated: done,
            truncated: false,
            final_obs: None,
        }
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut rb = ReplayBuffer::new(8, 2, 1).unwrap();
        for i in 0..5 {
            rb.append(0, &tr(i as f64, false)).unwrap();
            assert_eq!(rb.appended(), i + 1);
        }
        assert_eq!(rb.segment_len(0), 4);
        assert_eq!(rb.segment_len(1), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = rb.sample(200, 1, 0.9, &mut rng).unwrap();
        // Item 0 was overwritten; item 4 has no successor yet.
        assert!(b.obs.iter().all(|&x| (1.0..=3.0).contains(&x)));
        assert_eq!(rb.sampled(), 200);
    }

    #[test]
    fn single_valid_transition_is_repeated() {
        let mut rb = ReplayBuffer::new(16, 4, 1).unwrap();
        rb.append(3, &tr(7.0, true)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = rb.sample(4, 1, 0.99, &mut rng).unwrap();
        assert_eq!(b.sources, vec![(3, 0); 4]);
        assert_eq!(b.returns, vec![7.0; 4]);
        assert_eq!(b.discounts, vec![0.0; 4]);
    }

    #[test]
    fn insufficient_history() {
        let mut rb = ReplayBuffer::new(16, 2, 1).unwrap().with_min_history(3);
        rb.append(0, &tr(1.0, false)).unwrap();
        rb.append(0, &tr(2.0, false)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        match rb.sample(1, 1, 0.9, &mut rng) {
            Err(Error::InsufficientHistory { have: 1, need: 3 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_bootstraps_from_final_obs() {
        let mut rb = ReplayBuffer::new(8, 1, 1).unwrap();
        rb.append(0, &tr(1.0, false)).unwrap();
        rb.append(
            0,
            &Transition {
                final_obs: Some(vec![42.0]),
                truncated: true,
                ..tr(2.0, false)
            },
        )
        .unwrap();
        rb.append(0, &tr(5.0, false)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = rb.sample(64, 3, 0.5, &mut rng).unwrap();
        for i in 0..b.len {
            match b.sources[i].1 {
                0 => {
                    assert_eq!(b.returns[i], 1.0 + 0.5 * 2.0);
                    assert_eq!(b.discounts[i], 0.25);
                    assert_eq!(b.next_obs[i], 42.0);
                }
                1 => {
                    assert_eq!(b.returns[i], 2.0);
                    assert_eq!(b.discounts[i], 0.5);
                }
                s => panic!("start {s} has no complete window"),
            }
        }
    }

    #[test]
    fn sampling_is_uniform_over_valid_pairs() {
        let mut rb = ReplayBuffer::new(12, 3, 1).unwrap();
        // Segment sizes 4, 2, 3 give 3 + 1 + 2 valid starts at n = 1.
        for (sim, k) in [(0, 4), (1, 2), (2, 3)] {
            for i in 0..k {
                rb.append(sim, &tr(i as f64, false)).unwrap();
            }
        }
        assert_eq!(rb.valid_count(1), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = 100_000;
        let b = rb.sample(draws, 1, 0.9, &mut rng).unwrap();
        let mut counts = std::collections::HashMap::new();
        for s in &b.sources {
            *counts.entry(*s).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        let p = 1.0 / 6.0;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts.values() {
            assert!((*c as f64 - draws as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    /// Naive oracle: full per-simulator history lists, windows rebuilt from
    /// scratch for one start.
    fn oracle(hist: &[Transition], cap: usize, start: usize, n: usize, gamma: f64) -> Option<(f64, f64, Vec<f64>)> {
        let oldest = hist.len().saturating_sub(cap);
        if start < oldest || start >= hist.len() {
            return None;
        }
        let mut ret = 0.0;
        for k in 0..n {
            let t = hist.get(start + k)?;
            ret += gamma.powi(k as i32) * t.reward;
            if t.terminated {
                return Some((ret, 0.0, vec![0.0; t.obs.len()]));
            }
            if t.truncated {
                return Some((ret, gamma.powi(k as i32 + 1), t.final_obs.clone().unwrap()));
            }
        }
        let next = hist.get(start + n)?;
        Some((ret, gamma.powi(n as i32), next.obs.clone()))
    }

    proptest! {
        #[test]
        fn matches_naive_oracle(
            steps in proptest::collection::vec((0usize..3, 0u8..10, -2.0f64..2.0), 1..120),
            cap in 2usize..9,
            n in 1usize..4,
            seed in 0u64..1000,
        ) {
            prop_assume!(n < cap);
            let sims = 3;
            let mut rb = ReplayBuffer::new(cap * sims, sims, 2).unwrap();
            let mut hist: Vec<Vec<Transition>> = vec![Vec::new(); sims];
            for (k, &(sim, flag, r)) in steps.iter().enumerate() {
                let t = Transition {
                    obs: vec![k as f64, r],
                    action: k % 4,
                    reward: r,
                    terminated: flag == 0,
                    truncated: flag == 1,
                    final_obs: (flag == 1).then(|| vec![-(k as f64), 0.5]),
                };
                rb.append(sim, &t).unwrap();
                hist[sim].push(t);
            }
            let expected_valid: usize = (0..sims)
                .map(|s| (0..hist[s].len()).filter(|&i| oracle(&hist[s], cap, i, n, 0.9).is_some()).count())
                .sum();
            prop_assert_eq!(rb.valid_count(n), expected_valid);
            if expected_valid == 0 {
                return Ok(());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = rb.sample(64, n, 0.9, &mut rng).unwrap();
            for i in 0..b.len {
                let (sim, start) = b.sources[i];
                let (ret, disc, next) = oracle(&hist[sim], cap, start as usize, n, 0.9).expect("sampled an invalid start");
                let t = &hist[sim][start as usize];
                prop_assert_eq!(&b.obs[i * 2..i * 2 + 2], &t.obs[..]);
                prop_assert_eq!(b.actions[i], t.action);
                prop_assert!((b.returns[i] - ret).abs() < 1e-12);
                prop_assert!((b.discounts[i] - disc).abs() < 1e-12);
                prop_assert_eq!(&b.next_obs[i * 2..i * 2 + 2], &next[..]);
            }
        }
    }
}
