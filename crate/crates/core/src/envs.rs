//! Desk-scale environments and start-state decorrelation.
//!
//! Three simulators share one episode wrapper ([`Simulator`]) that tracks the
//! undiscounted episode return, enforces reset-after-terminal, and flags
//! time-limit truncation separately from true termination.

use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase")]
pub enum LatencyDist {
    /// Fixed delay per step.
    Constant { micros: f64 },
    /// `exp(N(mu, sigma^2))` microseconds per step.
    LogNormal { mu: f64, sigma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvSpec {
    /// Falling object on a `width x height` grid, paddle on the bottom row.
    Catch {
        #[serde(default = "default_catch_width")]
        width: usize,
        #[serde(default = "default_catch_height")]
        height: usize,
    },
    /// Inverted pendulum on a cart.
    PoleBalance {
        #[serde(default = "default_pole_len")]
        max_episode_len: usize,
        #[serde(default = "default_pole_perturbation")]
        perturbation: f64,
    },
    /// Constant observation, zero reward, randomized step latency.
    Latency {
        #[serde(default = "default_latency_obs")]
        obs_dim: usize,
        #[serde(default = "default_latency_actions")]
        action_count: usize,
        #[serde(default = "default_latency_len")]
        max_episode_len: usize,
        latency: LatencyDist,
    },
}

fn default_catch_width() -> usize {
    5
}
fn default_catch_height() -> usize {
    10
}
fn default_pole_len() -> usize {
    200
}
fn default_pole_perturbation() -> f64 {
    0.05
}
fn default_latency_obs() -> usize {
    4
}
fn default_latency_actions() -> usize {
    2
}
fn default_latency_len() -> usize {
    1000
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::catch()
    }
}

impl EnvSpec {
    pub fn catch() -> Self {
        EnvSpec::Catch {
            width: default_catch_width(),
            height: default_catch_height(),
        }
    }

    pub fn pole_balance() -> Self {
        EnvSpec::PoleBalance {
            max_episode_len: default_pole_len(),
            perturbation: default_pole_perturbation(),
        }
    }

    pub fn latency(latency: LatencyDist) -> Self {
        EnvSpec::Latency {
            obs_dim: default_latency_obs(),
            action_count: default_latency_actions(),
            max_episode_len: default_latency_len(),
            latency,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match *self {
            EnvSpec::Catch { width, height } => 2 * width + height,
            EnvSpec::PoleBalance { .. } => 4,
            EnvSpec::Latency { obs_dim, .. } => obs_dim,
        }
    }

    pub fn action_count(&self) -> usize {
        match *self {
            EnvSpec::Catch { .. } => 3,
            EnvSpec::PoleBalance { .. } => 2,
            EnvSpec::Latency { action_count, .. } => action_count,
        }
    }

    pub fn max_episode_len(&self) -> usize {
        match *self {
            EnvSpec::Catch { height, .. } => height.saturating_sub(1),
            EnvSpec::PoleBalance {
                max_episode_len, ..
            }
            | EnvSpec::Latency {
                max_episode_len, ..
            } => max_episode_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            EnvSpec::Catch { width, height } => {
                if width < 1 || height < 2 {
                    return config_err("catch needs width >= 1 and height >= 2");
                }
            }
            EnvSpec::PoleBalance { perturbation, .. } => {
                if !(0.0..1.0).contains(&perturbation) {
                    return config_err("polebalance perturbation must be in [0, 1)");
                }
            }
            EnvSpec::Latency {
                obs_dim, latency, ..
            } => {
                if obs_dim == 0 {
                    return config_err("latency env needs obs_dim >= 1");
                }
                match latency {
                    LatencyDist::Constant { micros } if !(micros >= 0.0) => {
                        return config_err("constant latency must be >= 0");
                    }
                    LatencyDist::LogNormal { sigma, mu } if !(sigma >= 0.0) || !mu.is_finite() => {
                        return config_err("lognormal latency needs finite mu and sigma >= 0");
                    }
                    _ => {}
                }
            }
        }
        if self.action_count() < 2 {
            return config_err("environments need at least 2 actions");
        }
        if self.max_episode_len() < 1 {
            return config_err("max_episode_len must be >= 1");
        }
        Ok(())
    }

    /// Optimal and uniform-random expected returns, when exactly computable.
    pub fn exact_values(&self) -> Option<CatchValues> {
        match *self {
            EnvSpec::Catch { width, height } => Some(catch_values(width, height)),
            _ => None,
        }
    }

    /// Range of possible discounted episode returns.
    pub fn return_bounds(&self, gamma: f64) -> (f64, f64) {
        match *self {
            EnvSpec::Catch { .. } => (0.0, 1.0),
            EnvSpec::PoleBalance { max_episode_len, .. } => {
                let hi = if gamma == 1.0 {
                    max_episode_len as f64
                } else {
                    (1.0 - gamma.powi(max_episode_len as i32)) / (1.0 - gamma)
                };
                (0.0, hi)
            }
            EnvSpec::Latency { .. } => (0.0, 0.0),
        }
    }

    pub fn build(&self) -> Result<Box<dyn Env>> {
        self.validate()?;
        Ok(match self.clone() {
            EnvSpec::Catch { width, height } => {
                Box::new(Simulator::new(self.clone(), Catch::new(width, height)))
            }
            EnvSpec::PoleBalance { perturbation, .. } => {
                Box::new(Simulator::new(self.clone(), PoleBalance::new(perturbation)))
            }
            EnvSpec::Latency {
                obs_dim, latency, ..
            } => Box::new(Simulator::new(self.clone(), Latency::new(obs_dim, latency)?)),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: f64,
    /// The episode reached a true terminal state (no bootstrapping past it).
    pub terminated: bool,
    /// The episode hit its step limit; the state itself is not terminal.
    pub truncated: bool,
    /// Undiscounted sum of rewards since reset, present once the episode ends.
    pub episode_return: Option<f64>,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

/// A resettable, steppable environment instance.
pub trait Env: Send {
    fn spec(&self) -> &EnvSpec;

    /// Starts a new episode; reseeds the instance's random stream.
    fn reset(&mut self, seed: u64) -> Vec<f64>;

    /// Starts a new episode continuing the instance's random stream.
    fn reset_next(&mut self) -> Vec<f64>;

    fn step(&mut self, action: usize) -> Result<StepResult>;

    /// Steps taken in the current episode.
    fn episode_steps(&self) -> usize;
}

/// Environment-specific state transition, driven by [`Simulator`].
pub(crate) trait Dynamics: Send {
    fn reset_state(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    /// Returns `(obs, reward, terminated)`.
    fn advance(&mut self, action: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, f64, bool);
}

pub(crate) struct Simulator<D> {
    spec: EnvSpec,
    dynamics: D,
    rng: ChaCha8Rng,
    steps: usize,
    episode_return: f64,
    needs_reset: bool,
}

impl<D: Dynamics> Simulator<D> {
    fn new(spec: EnvSpec, dynamics: D) -> Self {
        Simulator {
            spec,
            dynamics,
            rng: ChaCha8Rng::seed_from_u64(0),
            steps: 0,
            episode_return: 0.0,
            needs_reset: true,
        }
    }
}

impl<D: Dynamics> Env for Simulator<D> {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.reset_next()
    }

    fn reset_next(&mut self) -> Vec<f64> {
        self.steps = 0;
        self.episode_return = 0.0;
        self.needs_reset = false;
        self.dynamics.reset_state(&mut self.rng)
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        if self.needs_reset {
            return Err(Error::Env("step called on an environment that needs reset".into()));
        }
        if action >= self.spec.action_count() {
            return Err(Error::Env(format!(
                "action {action} out of range for {} actions",
                self.spec.action_count()
            )));
        }
        let (obs, reward, terminated) = self.dynamics.advance(action, &mut self.rng);
        self.steps += 1;
        self.episode_return += reward;
        let truncated = !terminated && self.steps >= self.spec.max_episode_len();
        let done = terminated || truncated;
        self.needs_reset = done;
        Ok(StepResult {
            obs,
            reward,
            terminated,
            truncated,
            episode_return: done.then_some(self.episode_return),
        })
    }

    fn episode_steps(&self) -> usize {
        self.steps
    }
}

/// Catch: the object starts in a random column of the top row and falls one
/// row per step; the paddle starts in the middle of the bottom row and moves
/// left, stays, or moves right. Reward 1 if the paddle is under the object
/// when it reaches the bottom row.
pub(crate) struct Catch {
    width: usize,
    height: usize,
    ball_col: usize,
    ball_row: usize,
    paddle: usize,
}

impl Catch {
    fn new(width: usize, height: usize) -> Self {
        Catch {
            width,
            height,
            ball_col: 0,
            ball_row: 0,
            paddle: width / 2,
        }
    }

    fn observe(&self) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let mut obs = vec![0.0; 2 * w + h];
        obs[self.ball_col] = 1.0;
        obs[w + self.ball_row] = 1.0;
        obs[w + h + self.paddle] = 1.0;
        obs
    }
}

impl Dynamics for Catch {
    fn reset_state(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.ball_col = rng.random_range(0..self.width);
        self.ball_row = 0;
        self.paddle = self.width / 2;
        self.observe()
    }

    fn advance(&mut self, action: usize, _rng: &mut ChaCha8Rng) -> (Vec<f64>, f64, bool) {
        self.paddle = (self.paddle + action).saturating_sub(1).min(self.width - 1);
        self.ball_row += 1;
        let done = self.ball_row == self.height - 1;
        let reward = if done && self.paddle == self.ball_col {
            1.0
        } else {
            0.0
        };
        (self.observe(), reward, done)
    }
}

/// Expected Catch returns, from exact dynamic programming over all states.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CatchValues {
    pub optimal: f64,
    pub random: f64,
    /// Probability of a caught object under the random policy; the per-episode
    /// return is Bernoulli with this mean.
    pub random_catch_prob: f64,
}

/// Solves Catch exactly by backward induction over (row, ball col, paddle col).
pub fn catch_values(width: usize, height: usize) -> CatchValues {
    let w = width;
    // value[b][p] at the current row; start from the bottom row.
    let terminal: Vec<Vec<f64>> = (0..w)
        .map(|b| (0..w).map(|p| if b == p { 1.0 } else { 0.0 }).collect())
        .collect();
    let (mut best, mut rand) = (terminal.clone(), terminal);
    for _row in (0..height - 1).rev() {
        let mut nb = vec![vec![0.0; w]; w];
        let mut nr = vec![vec![0.0; w]; w];
        for b in 0..w {
            for p in 0..w {
                let moves = [p.saturating_sub(1), p, (p + 1).min(w - 1)];
                nb[b][p] = moves.iter().map(|&q| best[b][q]).fold(f64::MIN, f64::max);
                nr[b][p] = moves.iter().map(|&q| rand[b][q]).sum::<f64>() / 3.0;
            }
        }
        best = nb;
        rand = nr;
    }
    let start = w / 2;
    let optimal = (0..w).map(|b| best[b][start]).sum::<f64>() / w as f64;
    let random = (0..w).map(|b| rand[b][start]).sum::<f64>() / w as f64;
    CatchValues {
        optimal,
        random,
        random_catch_prob: random,
    }
}

/// Cart-pole with Euler integration at 0.02 s.
pub(crate) struct PoleBalance {
    perturbation: f64,
    state: [f64; 4],
}

impl PoleBalance {
    const GRAVITY: f64 = 9.8;
    const CART_MASS: f64 = 1.0;
    const POLE_MASS: f64 = 0.1;
    const HALF_LENGTH: f64 = 0.5;
    const FORCE: f64 = 10.0;
    const DT: f64 = 0.02;
    const ANGLE_LIMIT: f64 = 12.0 * 2.0 * std::f64::consts::PI / 360.0;
    const POSITION_LIMIT: f64 = 2.4;

    fn new(perturbation: f64) -> Self {
        PoleBalance {
            perturbation,
            state: [0.0; 4],
        }
    }
}

impl Dynamics for PoleBalance {
    fn reset_state(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let b = self.perturbation;
        for s in &mut self.state {
            *s = if b > 0.0 { rng.random_range(-b..b) } else { 0.0 };
        }
        self.state.to_vec()
    }

    fn advance(&mut self, action: usize, _rng: &mut ChaCha8Rng) -> (Vec<f64>, f64, bool) {
        let [x, x_dot, theta, theta_dot] = self.state;
        let force = if action == 1 { Self::FORCE } else { -Self::FORCE };
        let total_mass = Self::CART_MASS + Self::POLE_MASS;
        let pm_len = Self::POLE_MASS * Self::HALF_LENGTH;
        let (sin, cos) = theta.sin_cos();
        let temp = (force + pm_len * theta_dot * theta_dot * sin) / total_mass;
        let theta_acc = (Self::GRAVITY * sin - cos * temp)
            / (Self::HALF_LENGTH * (4.0 / 3.0 - Self::POLE_MASS * cos * cos / total_mass));
        let x_acc = temp - pm_len * theta_acc * cos / total_mass;
        self.state = [
            x + Self::DT * x_dot,
            x_dot + Self::DT * x_acc,
            theta + Self::DT * theta_dot,
            theta_dot + Self::DT * theta_acc,
        ];
        let failed =
            self.state[0].abs() > Self::POSITION_LIMIT || self.state[2].abs() > Self::ANGLE_LIMIT;
        (self.state.to_vec(), 1.0, failed)
    }
}

/// Straggler model: every step blocks for a random duration.
pub(crate) struct Latency {
    obs: Vec<f64>,
    dist: LatencySampler,
}

enum LatencySampler {
    Constant(Duration),
    LogNormal(LogNormal<f64>),
}

impl Latency {
    fn new(obs_dim: usize, dist: LatencyDist) -> Result<Self> {
        let dist = match dist {
            LatencyDist::Constant { micros } => {
                LatencySampler::Constant(Duration::from_secs_f64(micros * 1e-6))
            }
            LatencyDist::LogNormal { mu, sigma } => LatencySampler::LogNormal(
                LogNormal::new(mu, sigma).map_err(|e| Error::Config(format!("lognormal: {e}")))?,
            ),
        };
        Ok(Latency {
            obs: vec![0.0; obs_dim],
            dist,
        })
    }
}

impl Dynamics for Latency {
    fn reset_state(&mut self, _rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.obs.clone()
    }

    fn advance(&mut self, _action: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, f64, bool) {
        let delay = match &self.dist {
            LatencySampler::Constant(d) => *d,
            LatencySampler::LogNormal(ln) => Duration::from_secs_f64(ln.sample(rng) * 1e-6),
        };
        if !delay.is_zero() {
            std::thread::sleep(delay);
        }
        (self.obs.clone(), 0.0, false)
    }
}

/// Outcome of decorrelating one environment.
#[derive(Clone, Debug, PartialEq)]
pub struct DecorrelatedStart {
    pub obs: Vec<f64>,
    /// Uniform-random actions taken (episodes ending on the way are reset).
    pub random_steps: usize,
}

/// Advances each freshly reset environment by an independently drawn number
/// of uniform-random actions in `0..=max_random_steps`.
pub fn decorrelate_starts<R: Rng>(
    envs: &mut [Box<dyn Env>],
    initial_obs: Vec<Vec<f64>>,
    max_random_steps: usize,
    rng: &mut R,
) -> Result<Vec<DecorrelatedStart>> {
    envs.iter_mut()
        .zip(initial_obs)
        .map(|(env, mut obs)| {
            let steps = rng.random_range(0..=max_random_steps);
            let actions = env.spec().action_count();
            for _ in 0..steps {
                let res = env.step(rng.random_range(0..actions))?;
                obs = if res.done() { env.reset_next() } else { res.obs };
            }
            Ok(DecorrelatedStart {
                obs,
                random_steps: steps,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::time::Instant;

    #[test]
    fn reset_is_deterministic() {
        let mut a = EnvSpec::catch().build().unwrap();
        let mut b = EnvSpec::catch().build().unwrap();
        assert_eq!(a.reset(3), b.reset(3));
        assert_eq!(a.reset(3), a.reset(3));
        let mut p = EnvSpec::pole_balance().build().unwrap();
        let o = p.reset(9);
        assert!(o.iter().all(|x| x.abs() <= 0.05));
        let mut l = EnvSpec::latency(LatencyDist::Constant { micros: 0.0 }).build().unwrap();
        assert_eq!(l.reset(1), vec![0.0; 4]);
    }

    #[test]
    fn catch_under_object_is_rewarded() {
        let mut env = EnvSpec::catch().build().unwrap();
        let obs = env.reset(5);
        let ball = obs[..5].iter().position(|&x| x == 1.0).unwrap();
        let mut paddle = 2usize;
        let mut last = None;
        for _ in 0..9 {
            let a = if paddle < ball {
                2
            } else if paddle > ball {
                0
            } else {
                1
            };
            paddle = (paddle + a).saturating_sub(1).min(4);
            last = Some(env.step(a).unwrap());
        }
        let last = last.unwrap();
        assert!(last.terminated && !last.truncated);
        assert_eq!(last.reward, 1.0);
        assert_eq!(last.episode_return, Some(1.0));
        assert!(env.step(1).is_err(), "terminal env must be reset");
    }

    #[test]
    fn out_of_range_action() {
        let mut env = EnvSpec::catch().build().unwrap();
        env.reset(0);
        assert!(env.step(3).is_err());
        let mut fresh = EnvSpec::catch().build().unwrap();
        assert!(fresh.step(0).is_err());
    }

    #[test]
    fn catch_exact_values() {
        let v = catch_values(5, 10);
        assert_eq!(v.optimal, 1.0);
        // 1x2 grid: no steps of freedom, object always above the paddle.
        assert_eq!(catch_values(1, 2).optimal, 1.0);
        // 3 columns, one step: paddle from 1 reaches any column.
        let small = catch_values(3, 2);
        assert_eq!(small.optimal, 1.0);
        assert!((small.random - 1.0 / 3.0).abs() < 1e-15);
        assert!(v.random > 0.0 && v.random < 0.5);
    }

    /// Random-policy mean return matches the exact value within 3 sigma.
    #[test]
    fn catch_random_policy_matches_oracle() {
        let values = catch_values(5, 10);
        let mut env = EnvSpec::catch().build().unwrap();
        env.reset(11);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let episodes = 20_000;
        let mut total = 0.0;
        for _ in 0..episodes {
            loop {
                let r = env.step(rng.random_range(0..3)).unwrap();
                if let Some(ret) = r.episode_return {
                    total += ret;
                    env.reset_next();
                    break;
                }
            }
        }
        let mean = total / episodes as f64;
        let p = values.random_catch_prob;
        let sigma = (p * (1.0 - p) / episodes as f64).sqrt();
        assert!((mean - p).abs() < 3.0 * sigma, "{mean} vs {p}");
    }

    #[test]
    fn polebalance_terminates_and_truncates() {
        let mut env = EnvSpec::pole_balance().build().unwrap();
        env.reset(0);
        let mut steps = 0;
        loop {
            let r = env.step(1).unwrap();
            steps += 1;
            if r.done() {
                assert!(r.terminated, "always pushing right topples the pole");
                assert_eq!(r.episode_return, Some(steps as f64));
                break;
            }
        }
        let mut short = EnvSpec::PoleBalance {
            max_episode_len: 3,
            perturbation: 0.0,
        }
        .build()
        .unwrap();
        short.reset(0);
        short.step(0).unwrap();
        short.step(1).unwrap();
        let r = short.step(0).unwrap();
        assert!(r.truncated && !r.terminated);
    }

    #[test]
    fn latency_zero_returns_immediately() {
        let mut env = EnvSpec::latency(LatencyDist::Constant { micros: 0.0 }).build().unwrap();
        env.reset(0);
        let t = Instant::now();
        for _ in 0..100 {
            let r = env.step(0).unwrap();
            assert_eq!(r.reward, 0.0);
        }
        assert!(t.elapsed() < Duration::from_millis(50));
    }

    #[test]
    fn episode_return_is_sum_of_rewards() {
        let mut env = EnvSpec::pole_balance().build().unwrap();
        env.reset(4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut sum = 0.0;
        for _ in 0..2000 {
            let r = env.step(rng.random_range(0..2)).unwrap();
            sum += r.reward;
            if let Some(ret) = r.episode_return {
                assert_eq!(ret, sum);
                sum = 0.0;
                env.reset_next();
            }
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(EnvSpec::Catch { width: 0, height: 5 }.build().is_err());
        assert!(EnvSpec::Latency {
            obs_dim: 2,
            action_count: 1,
            max_episode_len: 5,
            latency: LatencyDist::Constant { micros: 0.0 }
        }
        .build()
        .is_err());
        assert!(EnvSpec::latency(LatencyDist::LogNormal { mu: 0.0, sigma: -1.0 })
            .build()
            .is_err());
    }

    fn fresh_catch(n: usize, seed: u64) -> (Vec<Box<dyn Env>>, Vec<Vec<f64>>) {
        let mut envs: Vec<_> = (0..n).map(|_| EnvSpec::catch().build().unwrap()).collect();
        let obs = envs.iter_mut().map(|e| e.reset(seed)).collect();
        (envs, obs)
    }

    #[test]
    fn decorrelation_zero_steps_is_identity() {
        let (mut envs, obs) = fresh_catch(8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = decorrelate_starts(&mut envs, obs.clone(), 0, &mut rng).unwrap();
        assert!(out.iter().zip(&obs).all(|(d, o)| d.obs == *o && d.random_steps == 0));
    }

    #[test]
    fn decorrelation_diversifies_starts() {
        for seed in 0..20 {
            let (mut envs, obs) = fresh_catch(64, 42);
            let distinct_before: HashSet<_> = obs.iter().map(|o| format!("{o:?}")).collect();
            assert_eq!(distinct_before.len(), 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = decorrelate_starts(&mut envs, obs, 50, &mut rng).unwrap();
            let distinct: HashSet<_> = out.iter().map(|d| format!("{:?}", d.obs)).collect();
            assert!(distinct.len() > 1);
        }
    }

    #[test]
    fn decorrelation_step_count_recorded() {
        let (mut envs, obs) = fresh_catch(1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = decorrelate_starts(&mut envs, obs, 30, &mut rng).unwrap();
        let mut replay = ChaCha8Rng::seed_from_u64(7);
        let expected: usize = replay.random_range(0..=30);
        assert_eq!(out[0].random_steps, expected);
        // 9-step episodes: the current episode step count is the remainder
        // once completed episodes are accounted for.
        assert_eq!(envs[0].episode_steps(), expected % 9);
    }
}
