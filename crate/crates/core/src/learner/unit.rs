//! One learner unit: a sampler, a network, and the algorithm's update loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::algos::{
    a2c_loss_grad, catdqn_loss_grad, catdqn_target_dists, compute_returns_advantages, dqn_loss_grad, dqn_targets,
    epsilon_greedy, expected_q, ppo_update, updates_per_cycle, AlgoConfig, AlgoKind, NStepBatch, PgSamples,
    ReplayBuffer, Support,
};
use crate::error::{shape_err, Result};
use crate::nn::{GradVector, Network};
use crate::optim::{AsyncAccumulators, Optimizer, UpdateRule};
use crate::sampler::{mix_seed, AgentStep, SampleBatch, Sampler};
use crate::telemetry::{cosine_probe, CosinePair, ExperimentConfig, NormRow, NormTracker};

use super::Link;

/// Parameters and acting state seen at one pull from the central store.
#[derive(Clone, Debug, PartialEq)]
pub struct PullRecord {
    /// Environment steps this unit had taken when it pulled.
    pub env_step: u64,
    pub versions: Vec<u64>,
    /// Pulled values; kept only when recording is switched on.
    pub params: Option<Vec<f64>>,
}

/// What one sampling-plus-optimization cycle did.
#[derive(Clone, Debug, Default)]
pub struct CycleReport {
    pub env_steps: u64,
    pub updates: u64,
    pub samples_used: u64,
    /// Environment steps taken while learning was active.
    pub learning_steps: u64,
    pub episode_returns: Vec<f64>,
    pub cosines: Vec<(usize, CosinePair)>,
    pub norm_rows: Vec<NormRow>,
}

/// Update rule a learner uses with a given training batch size.
pub(crate) fn learner_rule(cfg: &ExperimentConfig, batch: usize) -> UpdateRule {
    match (cfg.optimizer, cfg.algo.dqn.adam_eps_coef) {
        (UpdateRule::Adam(mut h), Some(coef)) if !cfg.algo.algo.is_policy_gradient() => {
            h.eps = coef / batch as f64;
            UpdateRule::Adam(h)
        }
        (rule, _) => rule,
    }
}

pub(crate) fn make_support(cfg: &ExperimentConfig) -> Result<Option<Support<f64>>> {
    if cfg.algo.algo != AlgoKind::CatDqn {
        return Ok(None);
    }
    let (lo, hi) = cfg.value_bounds();
    Support::uniform(cfg.algo.catdqn.atoms, lo, hi).map(Some)
}

/// Optimizer state plus the routing of gradients to parameters.
pub(crate) struct UpdateCore {
    pub optimizer: Optimizer<f64>,
    acc: Option<AsyncAccumulators<f64>>,
    async_t: u64,
    norms: Option<(NormTracker, u64)>,
    pub rows: Vec<NormRow>,
}

impl UpdateCore {
    pub fn new(net: &Network, rule: UpdateRule, norm_every: Option<u64>) -> Self {
        UpdateCore {
            optimizer: Optimizer::new(rule, net.param_count()),
            acc: None,
            async_t: 0,
            norms: norm_every.map(|k| (NormTracker::new(net), k)),
            rows: Vec::new(),
        }
    }

    /// Applies one gradient through `link`; `env_step` and `learner` label
    /// any norm rows this produces.
    pub fn apply(&mut self, link: Link<'_>, params: &mut [f64], grad: &[f64], env_step: u64, learner: &str) -> Result<()> {
        let (used, step) = match link {
            Link::Local => {
                let s = self.optimizer.step(params, grad)?;
                (None, s)
            }
            Link::Sync { reducer, rank } => {
                let g = reducer.reduce(rank, grad)?;
                let s = self.optimizer.step(params, &g)?;
                (Some(g), s)
            }
            Link::Async { store, local_steps: 1, .. } => {
                self.async_t += 1;
                (None, store.async_step(params, grad, self.async_t)?)
            }
            Link::Async { store, local_steps, .. } => {
                let rule = self.optimizer.rule();
                let acc = self.acc.get_or_insert_with(|| AsyncAccumulators::new(params.len()));
                let s = self.optimizer.step(params, grad)?;
                acc.accumulate(grad, &s, rule.first_decay(), rule.second_decay())?;
                if acc.n as usize >= local_steps {
                    store.sync_accumulated(params, &mut self.optimizer, acc)?;
                }
                (None, s)
            }
        };
        if let Some((tracker, every)) = self.norms.as_mut() {
            tracker.observe(used.as_deref().unwrap_or(grad), &step);
            if tracker.pending() >= *every {
                self.rows.extend(tracker.record(params, env_step, learner));
            }
        }
        Ok(())
    }

    /// Local steps not yet folded into the central store.
    pub fn pending_local_steps(&self) -> u32 {
        self.acc.as_ref().map_or(0, |a| a.n)
    }

    /// Pushes any partial multi-step accumulation to the store.
    pub fn flush(&mut self, link: Link<'_>, params: &mut [f64]) -> Result<()> {
        if let (Link::Async { store, .. }, Some(acc)) = (link, self.acc.as_mut()) {
            if acc.n > 0 {
                store.sync_accumulated(params, &mut self.optimizer, acc)?;
            }
        }
        Ok(())
    }
}

/// Gradient of the DQN or categorical DQN loss on one replay minibatch.
pub(crate) fn dqn_grad(
    net: &Network,
    params: &[f64],
    target: &[f64],
    support: Option<&Support<f64>>,
    batch: &NStepBatch,
    double: bool,
) -> Result<(f64, GradVector<f64>)> {
    let n = batch.len;
    let actions = net.actions();
    match support {
        None => {
            let q_target = net.forward_q(target, &batch.next_obs, n)?;
            let q_online = if double { Some(net.forward_q(params, &batch.next_obs, n)?) } else { None };
            let y = dqn_targets(&batch.returns, &batch.discounts, &q_target, q_online.as_deref(), actions)?;
            dqn_loss_grad(net, params, &batch.obs, &batch.actions, &y)
        }
        Some(support) => {
            let d_target = net.forward_q_dist(target, &batch.next_obs, n)?;
            let d_online = if double { Some(net.forward_q_dist(params, &batch.next_obs, n)?) } else { None };
            let m = catdqn_target_dists(&batch.returns, &batch.discounts, &d_target, d_online.as_deref(), actions, support)?;
            catdqn_loss_grad(net, params, &batch.obs, &batch.actions, &m)
        }
    }
}

/// Samples from the softmax policy and reports values and log-probabilities.
fn pg_act(net: &Network, params: &[f64], rng: &mut ChaCha8Rng, obs: &[f64], batch: usize) -> Result<AgentStep> {
    let out = net.forward_policy_value(params, obs, batch)?;
    let na = net.actions();
    let mut actions = Vec::with_capacity(batch);
    let mut logprobs = Vec::with_capacity(batch);
    for row in out.probs.chunks(na) {
        let u: f64 = rng.random();
        let mut cum = 0.0;
        let mut a = na - 1;
        for (i, &p) in row.iter().enumerate() {
            cum += p;
            if u < cum {
                a = i;
                break;
            }
        }
        actions.push(a);
        logprobs.push(row[a].ln());
    }
    Ok(AgentStep {
        actions,
        values: Some(out.values),
        logprobs: Some(logprobs),
    })
}

/// Greedy action values per observation row: Q-values, or the expectation of
/// the return distribution.
pub(crate) fn action_values(net: &Network, params: &[f64], support: Option<&Support<f64>>, obs: &[f64], batch: usize) -> Result<Vec<f64>> {
    match support {
        None => net.forward_q(params, obs, batch),
        Some(s) => Ok(expected_q(&net.forward_q_dist(params, obs, batch)?, s)),
    }
}

fn dqn_act(
    net: &Network,
    params: &[f64],
    support: Option<&Support<f64>>,
    eps: f64,
    rng: &mut ChaCha8Rng,
    obs: &[f64],
    batch: usize,
) -> Result<AgentStep> {
    let q = action_values(net, params, support, obs, batch)?;
    Ok(AgentStep {
        actions: q.chunks(net.actions()).map(|row| epsilon_greedy(row, eps, rng)).collect(),
        values: None,
        logprobs: None,
    })
}

/// Values of the states a PG batch must bootstrap from: the observation after
/// the horizon and each truncated episode's final observation.
fn bootstrap_values(net: &Network, params: &[f64], batch: &SampleBatch) -> Result<(Vec<f64>, Vec<f64>)> {
    let boot = net.forward_policy_value(params, &batch.bootstrap_obs, batch.batch)?.values;
    if batch.truncation_obs.is_empty() {
        return Ok((boot, Vec::new()));
    }
    let obs: Vec<f64> = batch.truncation_obs.iter().flat_map(|e| e.obs.iter().copied()).collect();
    let trunc = net.forward_policy_value(params, &obs, batch.truncation_obs.len())?.values;
    Ok((boot, trunc))
}

pub struct LearnerUnit {
    id: usize,
    name: String,
    algo: AlgoConfig,
    net: Network,
    params: Vec<f64>,
    core: UpdateCore,
    sampler: Sampler,
    replay: Option<ReplayBuffer>,
    target: Option<Vec<f64>>,
    support: Option<Support<f64>>,
    act_rng: ChaCha8Rng,
    train_rng: ChaCha8Rng,
    train_seed: u64,
    updates_per_cycle: usize,
    learn_after: u64,
    cosine_probe: bool,
    updates: u64,
    env_steps: u64,
    pulls: Vec<PullRecord>,
    record_pull_params: bool,
}

impl LearnerUnit {
    /// Unit `id` of an experiment, starting from `init`.
    pub fn new(cfg: &ExperimentConfig, id: usize, init: &[f64]) -> Result<Self> {
        let net = Network::new(cfg.net_spec())?;
        if init.len() != net.param_count() {
            return shape_err(format!("initial parameters have length {}, network needs {}", init.len(), net.param_count()));
        }
        let mut sampler_cfg = cfg.sampler.clone();
        sampler_cfg.seed = mix_seed(cfg.seed ^ cfg.sampler.seed, 1000 + id as u64);
        let sampler = Sampler::new(sampler_cfg, &cfg.env)?;
        let b = sampler.total_sims();
        let algo = cfg.algo.clone();
        let dqn_family = !algo.algo.is_policy_gradient();
        let batch = if dqn_family { algo.dqn.batch_size } else { b * algo.horizon };
        let replay = if dqn_family {
            Some(ReplayBuffer::new(algo.dqn.replay_capacity, b, sampler.obs_dim())?.with_min_history(algo.dqn.batch_size))
        } else {
            None
        };
        let updates_per_cycle = if dqn_family {
            let u = updates_per_cycle(b, algo.horizon, algo.dqn.batch_size, algo.intensity())?;
            algo.dqn.max_updates_per_cycle.map_or(u, |cap| u.min(cap))
        } else {
            1
        };
        let train_seed = mix_seed(cfg.seed, 3000 + id as u64);
        Ok(LearnerUnit {
            id,
            name: format!("learner{id}"),
            core: UpdateCore::new(&net, learner_rule(cfg, batch), cfg.telemetry.norm_every_updates),
            params: init.to_vec(),
            target: dqn_family.then(|| init.to_vec()),
            support: make_support(cfg)?,
            replay,
            act_rng: ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 2000 + id as u64)),
            train_rng: ChaCha8Rng::seed_from_u64(train_seed),
            train_seed,
            updates_per_cycle,
            learn_after: (algo.dqn.min_history_batches * algo.dqn.batch_size) as u64,
            cosine_probe: cfg.telemetry.cosine_probe,
            algo,
            net,
            sampler,
            updates: 0,
            env_steps: 0,
            pulls: Vec::new(),
            record_pull_params: false,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn optimizer(&self) -> &Optimizer<f64> {
        &self.core.optimizer
    }

    pub fn replay(&self) -> Option<&ReplayBuffer> {
        self.replay.as_ref()
    }

    pub fn support(&self) -> Option<&Support<f64>> {
        self.support.as_ref()
    }

    pub fn sampler(&self) -> &Sampler {
        &self.sampler
    }

    /// Seed of the stream that draws replay minibatches.
    pub fn train_seed(&self) -> u64 {
        self.train_seed
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    /// Gradient updates per cycle once learning is active (DQN family).
    pub fn updates_per_cycle(&self) -> usize {
        self.updates_per_cycle
    }

    /// True once the replay gate has opened (always true for PG).
    pub fn learning(&self) -> bool {
        self.replay.as_ref().is_none_or(|r| r.appended() >= self.learn_after)
    }

    pub fn pulls(&self) -> &[PullRecord] {
        &self.pulls
    }

    /// Keep a copy of the parameters at every pull (for inspection).
    pub fn record_pull_params(&mut self, on: bool) {
        self.record_pull_params = on;
    }

    /// Greedy action values for a batch of observations.
    pub fn action_values(&self, obs: &[f64], batch: usize) -> Result<Vec<f64>> {
        action_values(&self.net, &self.params, self.support.as_ref(), obs, batch)
    }

    fn pull(&mut self, link: Link<'_>) -> Result<()> {
        if let Link::Async { store, .. } = link {
            if self.core.pending_local_steps() == 0 {
                let versions = store.pull(&mut self.params)?;
                self.pulls.push(PullRecord {
                    env_step: self.env_steps,
                    versions,
                    params: self.record_pull_params.then(|| self.params.clone()),
                });
            }
        }
        Ok(())
    }

    fn collect(&mut self, link: Link<'_>, eps: f64) -> Result<SampleBatch> {
        let horizon = self.algo.horizon;
        let chunk = match link {
            Link::Async { pull_horizon: Some(h), .. } if self.algo.algo == AlgoKind::Ppo => h,
            _ => horizon,
        };
        let mut parts = Vec::with_capacity(horizon / chunk);
        for _ in 0..horizon / chunk {
            self.pull(link)?;
            let LearnerUnit {
                net,
                params,
                act_rng,
                support,
                sampler,
                algo,
                ..
            } = self;
            let (net, params, support) = (&*net, &*params, support.as_ref());
            let batch = if algo.algo.is_policy_gradient() {
                sampler.collect(chunk, &mut |obs: &[f64], b: usize| pg_act(net, params, act_rng, obs, b))?
            } else {
                sampler.collect(chunk, &mut |obs: &[f64], b: usize| dqn_act(net, params, support, eps, act_rng, obs, b))?
            };
            self.env_steps += batch.len() as u64;
            parts.push(batch);
        }
        if parts.len() == 1 {
            Ok(parts.pop().expect("one part"))
        } else {
            SampleBatch::concat_time(parts)
        }
    }

    /// Samples one horizon and runs the algorithm's updates on it. `eps` is
    /// the exploration rate for value-based acting.
    pub fn cycle(&mut self, link: Link<'_>, eps: f64) -> Result<CycleReport> {
        let batch = self.collect(link, eps)?;
        let mut report = CycleReport {
            env_steps: batch.len() as u64,
            episode_returns: batch.completed.iter().map(|e| e.episode_return).collect(),
            ..Default::default()
        };
        match self.algo.algo {
            AlgoKind::A2c => self.train_a2c(link, &batch, &mut report)?,
            AlgoKind::Ppo => self.train_ppo(link, &batch, &mut report)?,
            AlgoKind::Dqn | AlgoKind::CatDqn => self.train_dqn(link, &batch, &mut report)?,
        }
        report.norm_rows = std::mem::take(&mut self.core.rows);
        Ok(report)
    }

    fn train_a2c(&mut self, link: Link<'_>, batch: &SampleBatch, report: &mut CycleReport) -> Result<()> {
        let (boot, trunc) = bootstrap_values(&self.net, &self.params, batch)?;
        let (returns, adv) = compute_returns_advantages(batch, &boot, &trunc, self.algo.gamma)?;
        let samples = PgSamples {
            obs: &batch.obs,
            actions: &batch.actions,
            returns: &returns,
            advantages: &adv,
            old_logprobs: None,
        };
        let coefs = self.algo.pg_coefs();
        if self.cosine_probe {
            // Halves are simulator columns, so each half holds whole trajectories.
            let cols = batch.batch;
            let order: Vec<usize> = (0..2)
                .flat_map(|h| (0..batch.horizon).flat_map(move |t| (h * cols / 2..(h + 1) * cols / 2).map(move |c| t * cols + c)))
                .collect();
            let (net, params, dim) = (&self.net, &self.params, batch.obs_dim);
            let pair = cosine_probe(&order, |idx| {
                let obs: Vec<f64> = idx.iter().flat_map(|&i| batch.obs[i * dim..(i + 1) * dim].iter().copied()).collect();
                let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
                let actions: Vec<usize> = idx.iter().map(|&i| batch.actions[i]).collect();
                let (r, a) = (pick(&returns), pick(&adv));
                let s = PgSamples {
                    obs: &obs,
                    actions: &actions,
                    returns: &r,
                    advantages: &a,
                    old_logprobs: None,
                };
                Ok(a2c_loss_grad(net, params, &s, coefs)?.1.into_inner())
            })?;
            report.cosines.push((batch.len(), pair));
        }
        let (_, grad) = a2c_loss_grad(&self.net, &self.params, &samples, coefs)?;
        self.core.apply(link, &mut self.params, &grad, self.env_steps, &self.name)?;
        self.updates += 1;
        report.updates = 1;
        report.samples_used = batch.len() as u64;
        report.learning_steps = batch.len() as u64;
        Ok(())
    }

    fn train_ppo(&mut self, link: Link<'_>, batch: &SampleBatch, report: &mut CycleReport) -> Result<()> {
        let (boot, trunc) = bootstrap_values(&self.net, &self.params, batch)?;
        let (returns, adv) = compute_returns_advantages(batch, &boot, &trunc, self.algo.gamma)?;
        let Some(old) = batch.logprobs.as_ref() else {
            return shape_err("ppo batch carries no acting log-probabilities");
        };
        let samples = PgSamples {
            obs: &batch.obs,
            actions: &batch.actions,
            returns: &returns,
            advantages: &adv,
            old_logprobs: Some(old),
        };
        let LearnerUnit {
            net,
            params,
            core,
            train_rng,
            algo,
            env_steps,
            name,
            ..
        } = self;
        let stats = ppo_update(net, params, &samples, &algo.ppo, algo.pg_coefs(), train_rng, |p, g| {
            core.apply(link, p, g, *env_steps, name)
        })?;
        self.updates += stats.updates as u64;
        report.updates = stats.updates as u64;
        report.samples_used = stats.samples_used as u64;
        report.learning_steps = batch.len() as u64;
        Ok(())
    }

    fn train_dqn(&mut self, link: Link<'_>, batch: &SampleBatch, report: &mut CycleReport) -> Result<()> {
        let replay = self.replay.as_mut().expect("dqn units own a replay buffer");
        replay.append_batch(batch)?;
        if replay.appended() < self.learn_after {
            return Ok(());
        }
        let d = &self.algo.dqn;
        let target = self.target.as_mut().expect("dqn units own a target network");
        for _ in 0..self.updates_per_cycle {
            let mb = replay.sample(d.batch_size, d.n_step, self.algo.gamma, &mut self.train_rng)?;
            let (_, grad) = dqn_grad(&self.net, &self.params, target, self.support.as_ref(), &mb, d.double)?;
            self.core.apply(link, &mut self.params, &grad, self.env_steps, &self.name)?;
            self.updates += 1;
            if self.updates % d.target_period as u64 == 0 {
                target.copy_from_slice(&self.params);
            }
        }
        report.updates = self.updates_per_cycle as u64;
        report.samples_used = (self.updates_per_cycle * d.batch_size) as u64;
        report.learning_steps = batch.len() as u64;
        Ok(())
    }

    /// Folds any pending multi-step progress into the store.
    pub fn flush(&mut self, link: Link<'_>) -> Result<()> {
        self.core.flush(link, &mut self.params)
    }
}
