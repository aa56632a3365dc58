use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use accelrl::algos::pg::clip_grad_norm;
use accelrl::algos::{argmax, discounted_returns, epsilon_greedy, updates_per_cycle};
use accelrl::envs::EnvSpec;
use accelrl::learner::{allreduce_mean, chunk_ranges};
use accelrl::sampler::{AgentStep, Sampler, SamplerConfig};
use accelrl::telemetry::ScoreTracker;

proptest! {
    #[test]
    fn chunks_partition_the_vector(len in 1usize..500, chunks in 1usize..16) {
        let ranges = chunk_ranges(len, chunks);
        prop_assert_eq!(ranges.len(), chunks);
        prop_assert_eq!(ranges[0].start, 0);
        prop_assert_eq!(ranges.last().unwrap().end, len);
        for w in ranges.windows(2) {
            prop_assert_eq!(w[0].end, w[1].start);
        }
        let sizes: Vec<usize> = ranges.iter().map(|r| r.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn allreduce_is_the_mean(grads in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 7), 1..9)) {
        let refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        let out = allreduce_mean(&refs).unwrap();
        prop_assert_eq!(&out, &allreduce_mean(&refs).unwrap());
        for i in 0..7 {
            let naive = grads.iter().map(|g| g[i]).sum::<f64>() / grads.len() as f64;
            prop_assert!((out[i] - naive).abs() <= 1e-12);
        }
    }

    #[test]
    fn undiscounted_returns_are_suffix_sums(rewards in prop::collection::vec(-1.0f64..1.0, 12), boot in -1.0f64..1.0) {
        // 4 steps x 3 columns, no episode ends.
        let (h, b) = (4, 3);
        let flags = vec![false; h * b];
        let out = discounted_returns(&rewards, &flags, &flags, &vec![0.0; h * b], &[boot; 3], h, b, 1.0).unwrap();
        for c in 0..b {
            for t in 0..h {
                let want: f64 = (t..h).map(|s| rewards[s * b + c]).sum::<f64>() + boot;
                prop_assert!((out[t * b + c] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn termination_cuts_the_bootstrap(rewards in prop::collection::vec(-1.0f64..1.0, 4), gamma in 0.0f64..1.0, cut in 0usize..4) {
        let mut terminated = vec![false; 4];
        terminated[cut] = true;
        let out = discounted_returns(&rewards, &terminated, &[false; 4], &[0.0; 4], &[123.0], 4, 1, gamma).unwrap();
        prop_assert_eq!(out[cut], rewards[cut]);
    }

    #[test]
    fn update_count_keeps_the_intensity(sims in 1usize..64, horizon in 1usize..64, batch in 1usize..256, intensity in 0.5f64..16.0) {
        let steps = (sims * horizon) as f64;
        if let Ok(u) = updates_per_cycle(sims, horizon, batch, intensity) {
            let measured = u as f64 * batch as f64 / steps;
            prop_assert!((measured - intensity).abs() <= batch as f64 / (2.0 * steps) + 1e-12);
        } else {
            prop_assert!(intensity * steps / (batch as f64) < 0.5);
        }
    }

    #[test]
    fn greedy_action_in_range(q in prop::collection::vec(-5.0f64..5.0, 1..8), eps in 0.0f64..1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert!(epsilon_greedy(&q, eps, &mut rng) < q.len());
        prop_assert_eq!(epsilon_greedy(&q, 0.0, &mut rng), argmax(&q));
    }

    #[test]
    fn clipped_norm_is_bounded(mut g in prop::collection::vec(-10.0f64..10.0, 1..20), max in 0.1f64..5.0) {
        let orig = g.clone();
        let before = clip_grad_norm(&mut g, max);
        let after = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(after <= max.max(before) + 1e-12);
        prop_assert!(after <= before + 1e-12);
        if before > 0.0 {
            for (a, b) in g.iter().zip(&orig) {
                prop_assert!((a * before - b * after).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn score_is_the_window_mean(returns in prop::collection::vec(-1.0f64..1.0, 1..60), cap in 1usize..20) {
        let mut tracker = ScoreTracker::new(cap);
        for &r in &returns {
            tracker.record(r);
        }
        let tail = &returns[returns.len().saturating_sub(cap)..];
        let want = tail.iter().sum::<f64>() / tail.len() as f64;
        prop_assert!((tracker.score().unwrap() - want).abs() <= 1e-12);
        prop_assert_eq!(tracker.episodes(), returns.len() as u64);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sampled_episode_returns_are_reward_sums(n in 1usize..4, half in 1usize..4, groups in 1usize..3, seed in any::<u64>()) {
        let cfg = SamplerConfig { seed, max_decorrelation_steps: 0, ..SamplerConfig::new(n, half * 2, groups) };
        let mut sampler = Sampler::new(cfg, &EnvSpec::catch()).unwrap();
        let mut k = 0usize;
        let mut policy = |_: &[f64], batch: usize| -> accelrl::Result<AgentStep> {
            k += 1;
            Ok(AgentStep { actions: (0..batch).map(|i| (i + k) % 3).collect(), values: None, logprobs: None })
        };
        let batch = sampler.collect(30, &mut policy).unwrap();
        let b = batch.batch;
        prop_assert_eq!(b, n * half * 2);
        prop_assert_eq!(batch.obs.len(), 30 * b * batch.obs_dim);
        prop_assert_eq!(batch.rewards.len(), 30 * b);
        let mut running = vec![0.0f64; b];
        let mut ends = Vec::new();
        for t in 0..30 {
            for c in 0..b {
                let i = t * b + c;
                running[c] += batch.rewards[i];
                if batch.terminated[i] || batch.truncated[i] {
                    ends.push((t, c, running[c]));
                    running[c] = 0.0;
                }
            }
        }
        let got: Vec<(usize, usize, f64)> = batch.completed.iter().map(|e| (e.t, e.column, e.episode_return)).collect();
        prop_assert_eq!(got, ends);
        let st = sampler.throughput_stats();
        prop_assert!((0.0..=1.0).contains(&st.server_idle_fraction));
        prop_assert!((0.0..=1.0).contains(&st.worker_idle_fraction));
    }

    #[test]
    fn environments_replay_bitwise(seed in any::<u64>(), actions in prop::collection::vec(0usize..3, 1..40)) {
        for spec in [EnvSpec::catch(), EnvSpec::pole_balance()] {
            let (mut a, mut b) = (spec.build().unwrap(), spec.build().unwrap());
            prop_assert_eq!(a.reset(seed), b.reset(seed));
            for &act in &actions {
                let act = act % spec.action_count();
                let (ra, rb) = (a.step(act).unwrap(), b.step(act).unwrap());
                prop_assert_eq!(&ra, &rb);
                if ra.done() {
                    prop_assert_eq!(a.reset_next(), b.reset_next());
                }
            }
        }
    }
}
