//! Synchronized batched sampling.
//!
//! `n` worker threads each own `m` simulators. Simulators are split round-robin
//! into `groups` (default 2) that alternate: while the action server runs
//! batched inference for one group, the workers step the other group's
//! simulators. Within a group every simulator advances in lock-step: the server
//! only infers once all workers have posted the group's observations for the
//! current time index, and workers only step once that group's actions exist.
//!
//! Columns of a [`SampleBatch`] are ordered by `(group, worker, slot)`.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{decorrelate_starts, Env, EnvSpec};
use crate::error::{config_err, shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_workers: usize,
    pub m_per_worker: usize,
    #[serde(default = "default_groups")]
    pub groups: usize,
    #[serde(default)]
    pub seed: u64,
    /// Upper bound of uniform-random warm-up actions per simulator.
    #[serde(default = "default_decorrelation")]
    pub max_decorrelation_steps: usize,
}

fn default_groups() -> usize {
    2
}
fn default_decorrelation() -> usize {
    100
}

impl SamplerConfig {
    pub fn new(n_workers: usize, m_per_worker: usize, groups: usize) -> Self {
        SamplerConfig {
            n_workers,
            m_per_worker,
            groups,
            seed: 0,
            max_decorrelation_steps: default_decorrelation(),
        }
    }

    pub fn total_sims(&self) -> usize {
        self.n_workers * self.m_per_worker
    }

    pub fn per_worker_group(&self) -> usize {
        self.m_per_worker / self.groups
    }

    /// Simulators served by one inference call.
    pub fn group_batch(&self) -> usize {
        self.n_workers * self.per_worker_group()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_workers == 0 || self.m_per_worker == 0 {
            return config_err("sampler needs n_workers >= 1 and m_per_worker >= 1");
        }
        if self.groups == 0 {
            return config_err("sampler needs at least one group");
        }
        if self.m_per_worker % self.groups != 0 {
            return config_err(format!(
                "m_per_worker ({}) must be a multiple of groups ({})",
                self.m_per_worker, self.groups
            ));
        }
        Ok(())
    }

    /// Batch column of simulator `sim` (0-based, construction order) on `worker`.
    pub fn column(&self, worker: usize, sim: usize) -> usize {
        let g = sim % self.groups;
        let slot = sim / self.groups;
        g * self.group_batch() + worker * self.per_worker_group() + slot
    }

    /// Reset seed of one simulator.
    pub fn sim_seed(&self, worker: usize, sim: usize) -> u64 {
        mix_seed(self.seed, (worker * self.m_per_worker + sim) as u64 + 1)
    }
}

/// SplitMix64-style seed derivation.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Output of one batched inference call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AgentStep {
    pub actions: Vec<usize>,
    /// State-value estimates (policy-gradient agents).
    pub values: Option<Vec<f64>>,
    /// Log-probability of each chosen action under the acting policy.
    pub logprobs: Option<Vec<f64>>,
}

/// Batched action server. Called once per `(time, group)` in time-major,
/// group-minor order with a `batch x obs_dim` observation block.
pub trait Policy {
    fn act(&mut self, obs: &[f64], batch: usize) -> Result<AgentStep>;
}

impl<F> Policy for F
where
    F: FnMut(&[f64], usize) -> Result<AgentStep>,
{
    fn act(&mut self, obs: &[f64], batch: usize) -> Result<AgentStep> {
        self(obs, batch)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompletedEpisode {
    pub t: usize,
    pub column: usize,
    pub episode_return: f64,
}

/// Observation at which an episode was cut by its time limit.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncationObs {
    pub t: usize,
    pub column: usize,
    pub obs: Vec<f64>,
}

/// Time-major record of one sampling horizon. Entry `(t, c)` lives at index
/// `t * batch + c` (times `obs_dim` for observations).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleBatch {
    pub horizon: usize,
    pub batch: usize,
    pub obs_dim: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub terminated: Vec<bool>,
    pub truncated: Vec<bool>,
    pub values: Option<Vec<f64>>,
    pub logprobs: Option<Vec<f64>>,
    /// Observations following the last step, one per column.
    pub bootstrap_obs: Vec<f64>,
    pub completed: Vec<CompletedEpisode>,
    pub truncation_obs: Vec<TruncationObs>,
}

impl SampleBatch {
    fn empty(horizon: usize, batch: usize, obs_dim: usize) -> Self {
        let n = horizon * batch;
        SampleBatch {
            horizon,
            batch,
            obs_dim,
            obs: vec![0.0; n * obs_dim],
            actions: vec![0; n],
            rewards: vec![0.0; n],
            terminated: vec![false; n],
            truncated: vec![false; n],
            values: None,
            logprobs: None,
            bootstrap_obs: vec![0.0; batch * obs_dim],
            completed: Vec::new(),
            truncation_obs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.horizon * self.batch
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn obs_at(&self, t: usize, column: usize) -> &[f64] {
        let i = (t * self.batch + column) * self.obs_dim;
        &self.obs[i..i + self.obs_dim]
    }

    fn record_agent(&mut self, t: usize, cols: std::ops::Range<usize>, step: &AgentStep) {
        let base = t * self.batch;
        let (len, cap) = (self.horizon * self.batch, cols.len());
        self.actions[base + cols.start..base + cols.end].copy_from_slice(&step.actions[..cap]);
        if let Some(v) = &step.values {
            self.values.get_or_insert_with(|| vec![0.0; len])[base + cols.start..base + cols.end]
                .copy_from_slice(v);
        }
        if let Some(lp) = &step.logprobs {
            self.logprobs.get_or_insert_with(|| vec![0.0; len])[base + cols.start..base + cols.end]
                .copy_from_slice(lp);
        }
    }

    /// Concatenates consecutive horizons of the same sampler along time.
    pub fn concat_time(parts: Vec<SampleBatch>) -> Result<SampleBatch> {
        let Some(first) = parts.first() else {
            return shape_err("concat_time needs at least one batch");
        };
        let (batch, obs_dim) = (first.batch, first.obs_dim);
        if parts.iter().any(|p| p.batch != batch || p.obs_dim != obs_dim) {
            return shape_err("concat_time parts differ in batch or obs_dim");
        }
        let has_values = parts.iter().all(|p| p.values.is_some());
        let has_logprobs = parts.iter().all(|p| p.logprobs.is_some());
        let mut out = SampleBatch {
            horizon: 0,
            batch,
            obs_dim,
            values: has_values.then(Vec::new),
            logprobs: has_logprobs.then(Vec::new),
            ..Default::default()
        };
        for p in parts {
            let offset = out.horizon;
            out.horizon += p.horizon;
            out.obs.extend(p.obs);
            out.actions.extend(p.actions);
            out.rewards.extend(p.rewards);
            out.terminated.extend(p.terminated);
            out.truncated.extend(p.truncated);
            if let (Some(v), Some(pv)) = (out.values.as_mut(), p.values) {
                v.extend(pv);
            }
            if let (Some(v), Some(pl)) = (out.logprobs.as_mut(), p.logprobs) {
                v.extend(pl);
            }
            out.bootstrap_obs = p.bootstrap_obs;
            out.completed.extend(p.completed.into_iter().map(|mut e| {
                e.t += offset;
                e
            }));
            out.truncation_obs.extend(p.truncation_obs.into_iter().map(|mut e| {
                e.t += offset;
                e
            }));
        }
        Ok(out)
    }
}

/// Creates simulators; called once per simulator with its worker and slot.
pub trait EnvFactory: Sync {
    fn make(&self, worker: usize, sim: usize) -> Result<Box<dyn Env>>;
}

impl EnvFactory for EnvSpec {
    fn make(&self, _worker: usize, _sim: usize) -> Result<Box<dyn Env>> {
        self.build()
    }
}

impl<F> EnvFactory for F
where
    F: Fn(usize, usize) -> Result<Box<dyn Env>> + Sync,
{
    fn make(&self, worker: usize, sim: usize) -> Result<Box<dyn Env>> {
        self(worker, sim)
    }
}

struct WorkerState {
    envs: Vec<Box<dyn Env>>,
    obs: Vec<Vec<f64>>,
}

fn build_worker(config: &SamplerConfig, factory: &dyn EnvFactory, worker: usize) -> Result<WorkerState> {
    let mut envs = (0..config.m_per_worker)
        .map(|sim| factory.make(worker, sim))
        .collect::<Result<Vec<_>>>()?;
    let dim = envs[0].spec().obs_dim();
    if envs.iter().any(|e| e.spec().obs_dim() != dim) {
        return config_err("all simulators of a sampler must share obs_dim");
    }
    let initial = envs
        .iter_mut()
        .enumerate()
        .map(|(sim, env)| env.reset(config.sim_seed(worker, sim)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed ^ 0xDEC0_0000, worker as u64));
    let obs = decorrelate_starts(&mut envs, initial, config.max_decorrelation_steps, &mut rng)?
        .into_iter()
        .map(|d| d.obs)
        .collect();
    Ok(WorkerState { envs, obs })
}

/// Sampling statistics for the most recent collection.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ThroughputStats {
    pub steps: usize,
    pub seconds: f64,
    pub steps_per_second: f64,
    /// Fraction of wall time the server spent waiting for observations.
    pub server_idle_fraction: f64,
    /// Mean fraction of wall time workers spent waiting for actions.
    pub worker_idle_fraction: f64,
    pub inference_calls: usize,
    /// `(upper bound in microseconds, count)` buckets of single-simulator step
    /// latency, powers of two.
    pub step_latency_hist: Vec<(u64, u64)>,
}

const HIST_BUCKETS: usize = 24;

fn hist_bucket(d: Duration) -> usize {
    let us = d.as_micros() as u64;
    ((64 - us.leading_zeros()) as usize).min(HIST_BUCKETS - 1)
}

#[derive(Default)]
struct GroupSlot {
    obs: Vec<f64>,
    posted: usize,
    obs_ready: Option<usize>,
    actions: Vec<usize>,
    actions_ready: Option<usize>,
}

/// Shared step buffers for one group, with its two-phase handshake.
struct GroupExchange {
    slot: Mutex<GroupSlot>,
    cv: Condvar,
}

struct Exchange {
    groups: Vec<GroupExchange>,
    abort: AtomicBool,
    failure: Mutex<Option<String>>,
}

impl Exchange {
    fn fail(&self, msg: String) {
        self.failure.lock().unwrap().get_or_insert(msg);
        self.abort.store(true, Ordering::SeqCst);
        for g in &self.groups {
            let _guard = g.slot.lock().unwrap();
            g.cv.notify_all();
        }
    }

    fn wait<'a>(
        &self,
        g: usize,
        mut guard: MutexGuard<'a, GroupSlot>,
        ready: impl Fn(&GroupSlot) -> bool,
    ) -> Result<MutexGuard<'a, GroupSlot>> {
        while !ready(&guard) {
            if self.abort.load(Ordering::SeqCst) {
                return Err(Error::Worker("collection aborted".into()));
            }
            guard = self.groups[g].cv.wait(guard).unwrap();
        }
        Ok(guard)
    }
}

struct WorkerRecord {
    worker: usize,
    rewards: Vec<f64>,
    terminated: Vec<bool>,
    truncated: Vec<bool>,
    completed: Vec<CompletedEpisode>,
    truncation_obs: Vec<TruncationObs>,
    idle: Duration,
    hist: [u64; HIST_BUCKETS],
}

pub struct Sampler {
    config: SamplerConfig,
    obs_dim: usize,
    action_count: usize,
    workers: Vec<WorkerState>,
    stats: ThroughputStats,
    steps_collected: u64,
}

impl Sampler {
    /// Builds and decorrelates all simulators.
    pub fn new(config: SamplerConfig, factory: &dyn EnvFactory) -> Result<Self> {
        config.validate()?;
        let workers = (0..config.n_workers)
            .map(|w| build_worker(&config, factory, w))
            .collect::<Result<Vec<_>>>()?;
        let spec = workers[0].envs[0].spec();
        let (obs_dim, action_count) = (spec.obs_dim(), spec.action_count());
        Ok(Sampler {
            config,
            obs_dim,
            action_count,
            workers,
            stats: ThroughputStats::default(),
            steps_collected: 0,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn total_sims(&self) -> usize {
        self.config.total_sims()
    }

    /// Environment steps taken across all collections (excluding warm-up).
    pub fn steps_collected(&self) -> u64 {
        self.steps_collected
    }

    pub fn throughput_stats(&self) -> &ThroughputStats {
        &self.stats
    }

    /// Current observations in column order (what the next step acts on).
    pub fn current_obs(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.total_sims() * self.obs_dim];
        for (w, ws) in self.workers.iter().enumerate() {
            for (sim, o) in ws.obs.iter().enumerate() {
                let c = self.config.column(w, sim);
                out[c * self.obs_dim..(c + 1) * self.obs_dim].copy_from_slice(o);
            }
        }
        out
    }

    /// Runs `horizon` synchronized steps on every simulator.
    pub fn collect(&mut self, horizon: usize, policy: &mut dyn Policy) -> Result<SampleBatch> {
        let cfg = self.config.clone();
        let (g_count, n) = (cfg.groups, cfg.n_workers);
        let group_batch = cfg.group_batch();
        let dim = self.obs_dim;
        let actions_allowed = self.action_count;
        let exchange = Exchange {
            groups: (0..g_count)
                .map(|_| GroupExchange {
                    slot: Mutex::new(GroupSlot {
                        obs: vec![0.0; group_batch * dim],
                        actions: vec![0; group_batch],
                        ..Default::default()
                    }),
                    cv: Condvar::new(),
                })
                .collect(),
            abort: AtomicBool::new(false),
            failure: Mutex::new(None),
        };
        let mut batch = SampleBatch::empty(horizon, cfg.total_sims(), dim);
        let start = Instant::now();
        let mut server_idle = Duration::ZERO;
        let mut calls = 0;

        let (server_result, records) = std::thread::scope(|scope| {
            let handles: Vec<_> = self
                .workers
                .iter_mut()
                .enumerate()
                .map(|(w, ws)| {
                    let exchange = &exchange;
                    let cfg = &cfg;
                    scope.spawn(move || {
                        let r = run_worker(w, ws, cfg, horizon, exchange);
                        if let Err(e) = &r {
                            exchange.fail(format!("worker {w}: {e}"));
                        }
                        r
                    })
                })
                .collect();

            let server = (|| -> Result<()> {
                for t in 0..=horizon {
                    for g in 0..g_count {
                        let ex = &exchange.groups[g];
                        let wait_start = Instant::now();
                        let obs = {
                            let guard = ex.slot.lock().unwrap();
                            let mut guard = exchange.wait(g, guard, |s| s.obs_ready == Some(t))?;
                            guard.obs_ready = None;
                            guard.posted = 0;
                            guard.obs.clone()
                        };
                        server_idle += wait_start.elapsed();
                        let cols = g * group_batch..(g + 1) * group_batch;
                        if t == horizon {
                            batch.bootstrap_obs[cols.start * dim..cols.end * dim].copy_from_slice(&obs);
                            continue;
                        }
                        let base = (t * batch.batch + cols.start) * dim;
                        batch.obs[base..base + group_batch * dim].copy_from_slice(&obs);
                        let step = policy.act(&obs, group_batch)?;
                        calls += 1;
                        check_agent_step(&step, group_batch, actions_allowed)?;
                        batch.record_agent(t, cols, &step);
                        let mut guard = ex.slot.lock().unwrap();
                        guard.actions.copy_from_slice(&step.actions);
                        guard.actions_ready = Some(t);
                        ex.cv.notify_all();
                    }
                }
                Ok(())
            })();
            if let Err(e) = &server {
                exchange.fail(format!("server: {e}"));
            }
            let records: Vec<_> = handles.into_iter().map(|h| h.join()).collect();
            (server, records)
        });

        if let Some(msg) = exchange.failure.lock().unwrap().take() {
            // Prefer the root cause over the generic abort seen by the others.
            let root = records.iter().find_map(|r| match r {
                Ok(Err(e)) if !matches!(e, Error::Worker(m) if m == "collection aborted") => {
                    Some(e.to_string())
                }
                Err(_) => Some("worker panicked".to_string()),
                _ => None,
            });
            return Err(Error::Worker(root.map_or(msg.clone(), |r| format!("{msg} ({r})"))));
        }
        server_result?;

        let elapsed = start.elapsed();
        let mut worker_idle = Duration::ZERO;
        let mut hist = [0u64; HIST_BUCKETS];
        for rec in records {
            let rec = match rec {
                Ok(Ok(rec)) => rec,
                Ok(Err(e)) => return Err(e),
                Err(_) => return Err(Error::Worker("worker panicked".into())),
            };
            worker_idle += rec.idle;
            for (h, c) in hist.iter_mut().zip(rec.hist) {
                *h += c;
            }
            for t in 0..horizon {
                for sim in 0..cfg.m_per_worker {
                    let c = cfg.column(rec.worker, sim);
                    let i = t * batch.batch + c;
                    let j = t * cfg.m_per_worker + sim;
                    batch.rewards[i] = rec.rewards[j];
                    batch.terminated[i] = rec.terminated[j];
                    batch.truncated[i] = rec.truncated[j];
                }
            }
            batch.completed.extend(rec.completed);
            batch.truncation_obs.extend(rec.truncation_obs);
        }
        batch.completed.sort_by_key(|e| (e.t, e.column));
        batch.truncation_obs.sort_by_key(|e| (e.t, e.column));

        let secs = elapsed.as_secs_f64().max(1e-12);
        let steps = horizon * cfg.total_sims();
        self.steps_collected += steps as u64;
        self.stats = ThroughputStats {
            steps,
            seconds: secs,
            steps_per_second: steps as f64 / secs,
            server_idle_fraction: (server_idle.as_secs_f64() / secs).clamp(0.0, 1.0),
            worker_idle_fraction: (worker_idle.as_secs_f64() / (secs * n as f64)).clamp(0.0, 1.0),
            inference_calls: calls,
            step_latency_hist: hist
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(b, &c)| (1u64 << b, c))
                .collect(),
        };
        Ok(batch)
    }
}

fn check_agent_step(step: &AgentStep, batch: usize, actions: usize) -> Result<()> {
    if step.actions.len() != batch {
        return shape_err(format!("policy returned {} actions for {batch} observations", step.actions.len()));
    }
    if let Some(a) = step.actions.iter().find(|&&a| a >= actions) {
        return Err(Error::Env(format!("policy chose action {a}, only {actions} exist")));
    }
    for (name, v) in [("values", &step.values), ("logprobs", &step.logprobs)] {
        if v.as_ref().is_some_and(|v| v.len() != batch) {
            return shape_err(format!("policy {name} length does not match batch {batch}"));
        }
    }
    Ok(())
}

fn run_worker(
    w: usize,
    ws: &mut WorkerState,
    cfg: &SamplerConfig,
    horizon: usize,
    exchange: &Exchange,
) -> Result<WorkerRecord> {
    let (g_count, mg, m) = (cfg.groups, cfg.per_worker_group(), cfg.m_per_worker);
    let dim = ws.obs[0].len();
    let mut rec = WorkerRecord {
        worker: w,
        rewards: vec![0.0; horizon * m],
        terminated: vec![false; horizon * m],
        truncated: vec![false; horizon * m],
        completed: Vec::new(),
        truncation_obs: Vec::new(),
        idle: Duration::ZERO,
        hist: [0; HIST_BUCKETS],
    };
    let post = |g: usize, t: usize, ws: &WorkerState| {
        let ex = &exchange.groups[g];
        let mut slot = ex.slot.lock().unwrap();
        for k in 0..mg {
            let sim = k * g_count + g;
            let off = (w * mg + k) * dim;
            slot.obs[off..off + dim].copy_from_slice(&ws.obs[sim]);
        }
        slot.posted += 1;
        if slot.posted == cfg.n_workers {
            slot.obs_ready = Some(t);
            ex.cv.notify_all();
        }
    };
    for g in 0..g_count {
        post(g, 0, ws);
    }
    let mut actions = vec![0usize; mg];
    for t in 0..horizon {
        for g in 0..g_count {
            let wait_start = Instant::now();
            {
                let ex = &exchange.groups[g];
                let guard = ex.slot.lock().unwrap();
                let guard = exchange.wait(g, guard, |s| s.actions_ready == Some(t))?;
                actions.copy_from_slice(&guard.actions[w * mg..(w + 1) * mg]);
            }
            rec.idle += wait_start.elapsed();
            for (k, &a) in actions.iter().enumerate() {
                let sim = k * g_count + g;
                let step_start = Instant::now();
                let res = ws.envs[sim].step(a)?;
                rec.hist[hist_bucket(step_start.elapsed())] += 1;
                let j = t * m + sim;
                rec.rewards[j] = res.reward;
                rec.terminated[j] = res.terminated;
                rec.truncated[j] = res.truncated;
                let column = cfg.column(w, sim);
                if let Some(ret) = res.episode_return {
                    rec.completed.push(CompletedEpisode {
                        t,
                        column,
                        episode_return: ret,
                    });
                }
                ws.obs[sim] = if res.done() {
                    if res.truncated {
                        rec.truncation_obs.push(TruncationObs {
                            t,
                            column,
                            obs: res.obs,
                        });
                    }
                    ws.envs[sim].reset_next()
                } else {
                    res.obs
                };
            }
            post(g, t + 1, ws);
        }
    }
    Ok(rec)
}

/// Single-threaded oracle: builds simulators exactly like [`Sampler::new`]
/// and steps them in the same inference order without any concurrency.
pub fn serial_reference_collect(
    config: &SamplerConfig,
    factory: &dyn EnvFactory,
    policy: &mut dyn Policy,
    horizon: usize,
) -> Result<SampleBatch> {
    config.validate()?;
    let mut workers = (0..config.n_workers)
        .map(|w| build_worker(config, factory, w))
        .collect::<Result<Vec<_>>>()?;
    let dim = workers[0].envs[0].spec().obs_dim();
    let total = config.total_sims();
    let mut batch = SampleBatch::empty(horizon, total, dim);
    // Column -> (worker, sim), following the documented column order.
    let mut owner = vec![(0, 0); total];
    for w in 0..config.n_workers {
        for sim in 0..config.m_per_worker {
            owner[config.column(w, sim)] = (w, sim);
        }
    }
    let gb = config.group_batch();
    for t in 0..horizon {
        for g in 0..config.groups {
            let cols = g * gb..(g + 1) * gb;
            let mut obs = Vec::with_capacity(gb * dim);
            for c in cols.clone() {
                let (w, sim) = owner[c];
                obs.extend_from_slice(&workers[w].obs[sim]);
            }
            let base = (t * total + cols.start) * dim;
            batch.obs[base..base + gb * dim].copy_from_slice(&obs);
            let step = policy.act(&obs, gb)?;
            check_agent_step(&step, gb, workers[0].envs[0].spec().action_count())?;
            batch.record_agent(t, cols.clone(), &step);
            for (k, c) in cols.enumerate() {
                let (w, sim) = owner[c];
                let ws = &mut workers[w];
                let res = ws.envs[sim].step(step.actions[k])?;
                let i = t * total + c;
                batch.rewards[i] = res.reward;
                batch.terminated[i] = res.terminated;
                batch.truncated[i] = res.truncated;
                if let Some(ret) = res.episode_return {
                    batch.completed.push(CompletedEpisode {
                        t,
                        column: c,
                        episode_return: ret,
                    });
                }
                ws.obs[sim] = if res.done() {
                    if res.truncated {
                        batch.truncation_obs.push(TruncationObs {
                            t,
                            column: c,
                            obs: res.obs,
                        });
                    }
                    ws.envs[sim].reset_next()
                } else {
                    res.obs
                };
            }
        }
    }
    for c in 0..total {
        let (w, sim) = owner[c];
        batch.bootstrap_obs[c * dim..(c + 1) * dim].copy_from_slice(&workers[w].obs[sim]);
    }
    batch.completed.sort_by_key(|e| (e.t, e.column));
    batch.truncation_obs.sort_by_key(|e| (e.t, e.column));
    Ok(batch)
}

/// Stand-in for accelerator inference: blocks for
/// `fixed_micros + per_sample_micros * batch` and returns action 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatedInference {
    pub fixed_micros: f64,
    pub per_sample_micros: f64,
}

impl Policy for SimulatedInference {
    fn act(&mut self, _obs: &[f64], batch: usize) -> Result<AgentStep> {
        let us = self.fixed_micros + self.per_sample_micros * batch as f64;
        if us > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(us * 1e-6));
        }
        Ok(AgentStep {
            actions: vec![0; batch],
            values: None,
            logprobs: None,
        })
    }
}
