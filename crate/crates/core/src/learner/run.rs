//! Run drivers: single and synchronous trainers, the asynchronous runner, the
//! replay-sharing secondary learner, and the metric bookkeeping they share.

use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::algos::{argmax, updates_per_cycle, LinearSchedule, ReplayBuffer, Support};
use crate::error::{config_err, Error, Result};
use crate::nn::Network;
use crate::sampler::mix_seed;
use crate::telemetry::metrics::write_summary;
use crate::telemetry::probes::epsilon_policy;
use crate::telemetry::{
    eval_pause, summarize, write_params, CosineRecord, CsvSink, EvalRecord, EvalResult, ExperimentConfig,
    IntensityRecord, NormRow, RunSummary, ScoreRecord, ScoreTracker, Topology,
};

use super::store::CentralStore;
use super::unit::{action_values, dqn_grad, learner_rule, make_support, CycleReport, LearnerUnit, UpdateCore};
use super::{Link, Reducer};

/// Every record a run produced, in emission order.
#[derive(Clone, Debug, Default)]
pub struct RunRecords {
    pub scores: Vec<ScoreRecord>,
    pub evals: Vec<EvalRecord>,
    pub intensity: Vec<IntensityRecord>,
    pub norms: Vec<NormRow>,
    pub cosine: Vec<CosineRecord>,
    pub secondary_evals: Vec<EvalRecord>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub summary: RunSummary,
    /// Final parameters (the central ones for asynchronous runs).
    pub params: Vec<f64>,
    pub secondary_params: Option<Vec<f64>>,
    pub records: RunRecords,
}

struct Sinks {
    scores: CsvSink<ScoreRecord>,
    evals: Option<CsvSink<EvalRecord>>,
    intensity: CsvSink<IntensityRecord>,
    norms: Option<CsvSink<NormRow>>,
    cosine: Option<CsvSink<CosineRecord>>,
    secondary_evals: Option<CsvSink<EvalRecord>>,
}

impl Sinks {
    fn create(dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        cfg.save(&dir.join("config.toml"))?;
        let evals = evals_enabled(cfg);
        Ok(Sinks {
            scores: CsvSink::create(&dir.join("scores.csv"))?,
            evals: evals.then(|| CsvSink::create(&dir.join("eval.csv"))).transpose()?,
            intensity: CsvSink::create(&dir.join("intensity.csv"))?,
            norms: cfg.telemetry.norm_every_updates.map(|_| CsvSink::create(&dir.join("norms.csv"))).transpose()?,
            cosine: cfg.telemetry.cosine_probe.then(|| CsvSink::create(&dir.join("cosine.csv"))).transpose()?,
            secondary_evals: (evals && cfg.secondary.is_some())
                .then(|| CsvSink::create(&dir.join("secondary_eval.csv")))
                .transpose()?,
        })
    }

    fn flush(&mut self) -> Result<()> {
        self.scores.flush()?;
        self.intensity.flush()?;
        for s in [self.evals.as_mut(), self.secondary_evals.as_mut()].into_iter().flatten() {
            s.flush()?;
        }
        if let Some(s) = self.norms.as_mut() {
            s.flush()?;
        }
        if let Some(s) = self.cosine.as_mut() {
            s.flush()?;
        }
        Ok(())
    }
}

fn evals_enabled(cfg: &ExperimentConfig) -> bool {
    !cfg.algo.algo.is_policy_gradient() && cfg.eval.every_steps.is_some()
}

fn initial_params(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    Ok(Network::new(cfg.net_spec())?.init(mix_seed(cfg.seed, 7)).into_inner())
}

fn epsilon_schedule(cfg: &ExperimentConfig) -> LinearSchedule {
    let d = &cfg.algo.dqn;
    LinearSchedule {
        start: d.eps_start,
        end: d.eps_end,
        fraction: d.eps_fraction,
    }
}

/// Frozen-parameter evaluation with the configured evaluation epsilon.
pub(crate) fn evaluate_params(
    cfg: &ExperimentConfig,
    net: &Network,
    params: &[f64],
    support: Option<&Support<f64>>,
    seed: u64,
) -> Result<EvalResult> {
    let greedy = |obs: &[f64]| -> Result<usize> { Ok(argmax(&action_values(net, params, support, obs, 1)?)) };
    let mut policy = epsilon_policy(greedy, net.actions(), cfg.eval.epsilon, mix_seed(seed, 1));
    eval_pause(&cfg.env, &mut policy, cfg.eval.steps, cfg.eval.max_path_len, seed)
}

/// Score, intensity, cosine and evaluation bookkeeping shared by the drivers.
struct Monitor {
    cfg: ExperimentConfig,
    scores: ScoreTracker,
    records: RunRecords,
    sinks: Option<Sinks>,
    env_steps: u64,
    updates: u64,
    next_score: u64,
    next_eval: Option<u64>,
    evals_done: u64,
    cos_sum: f64,
    cos_count: u64,
}

impl Monitor {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let sinks = cfg.out_dir.as_deref().map(|d| Sinks::create(d, cfg)).transpose()?;
        Ok(Monitor {
            cfg: cfg.clone(),
            scores: ScoreTracker::default(),
            records: RunRecords::default(),
            sinks,
            env_steps: 0,
            updates: 0,
            next_score: cfg.telemetry.score_every_steps,
            next_eval: evals_enabled(cfg).then(|| cfg.eval.every_steps.unwrap_or(u64::MAX)),
            evals_done: 0,
            cos_sum: 0.0,
            cos_count: 0,
        })
    }

    fn observe(&mut self, reports: &[CycleReport], updates: u64) -> Result<()> {
        self.updates = updates;
        let (mut used, mut learning) = (0, 0);
        for r in reports {
            self.env_steps += r.env_steps;
            used += r.samples_used;
            learning += r.learning_steps;
            for &ret in &r.episode_returns {
                self.scores.record(ret);
            }
            for &(batch, pair) in &r.cosines {
                self.cos_sum += pair.full_half;
                self.cos_count += 1;
                let rec = CosineRecord {
                    update: self.cos_count,
                    batch,
                    cos_full_half: pair.full_half,
                    cos_half_half: pair.half_half,
                    running_mean: self.cos_sum / self.cos_count as f64,
                };
                if let Some(s) = self.sinks.as_mut().and_then(|s| s.cosine.as_mut()) {
                    s.write(&rec)?;
                }
                self.records.cosine.push(rec);
            }
            self.push_norms(&r.norm_rows)?;
        }
        let rec = IntensityRecord {
            step: self.env_steps,
            updates: self.updates,
            samples_used: used,
            learning_steps: learning,
            intensity: (learning > 0).then(|| used as f64 / learning as f64),
        };
        if let Some(s) = self.sinks.as_mut() {
            s.intensity.write(&rec)?;
        }
        self.records.intensity.push(rec);
        while self.env_steps >= self.next_score {
            self.push_score()?;
            self.next_score += self.cfg.telemetry.score_every_steps;
        }
        Ok(())
    }

    fn push_norms(&mut self, rows: &[NormRow]) -> Result<()> {
        if let Some(s) = self.sinks.as_mut().and_then(|s| s.norms.as_mut()) {
            for r in rows {
                s.write(r)?;
            }
        }
        self.records.norms.extend_from_slice(rows);
        Ok(())
    }

    fn push_score(&mut self) -> Result<()> {
        let rec = ScoreRecord {
            step: self.env_steps,
            updates: self.updates,
            episodes: self.scores.episodes(),
            score: self.scores.score(),
        };
        if let Some(s) = self.sinks.as_mut() {
            s.scores.write(&rec)?;
        }
        self.records.scores.push(rec);
        Ok(())
    }

    fn eval_due(&self) -> bool {
        self.next_eval.is_some_and(|n| self.env_steps >= n)
    }

    fn eval_seed(&self) -> u64 {
        mix_seed(self.cfg.seed, 5000 + self.evals_done)
    }

    fn push_eval(&mut self, primary: EvalResult, secondary: Option<EvalResult>) -> Result<()> {
        let mk = |r: EvalResult| EvalRecord {
            step: self.env_steps,
            episodes: r.episodes as u64,
            score: r.mean,
        };
        let rec = mk(primary);
        let sec = secondary.map(mk);
        if let Some(s) = self.sinks.as_mut() {
            if let Some(e) = s.evals.as_mut() {
                e.write(&rec)?;
            }
            if let (Some(e), Some(r)) = (s.secondary_evals.as_mut(), sec.as_ref()) {
                e.write(r)?;
            }
        }
        self.records.evals.push(rec);
        self.records.secondary_evals.extend(sec);
        self.evals_done += 1;
        let every = self.cfg.eval.every_steps.unwrap_or(u64::MAX);
        while let Some(n) = self.next_eval.filter(|&n| n <= self.env_steps) {
            self.next_eval = Some(n.saturating_add(every));
        }
        Ok(())
    }

    fn last_eval_step(&self) -> Option<u64> {
        self.records.evals.last().map(|r| r.step)
    }

    fn finish(mut self, params: Vec<f64>, secondary_params: Option<Vec<f64>>) -> Result<RunOutcome> {
        if self.records.scores.last().is_none_or(|r| r.step != self.env_steps) {
            self.push_score()?;
        }
        let r = &self.records;
        let summary = summarize(&r.scores, &r.evals, &r.intensity, &r.cosine);
        if let Some(mut s) = self.sinks.take() {
            s.flush()?;
            let dir = self.cfg.out_dir.as_deref().expect("sinks imply an output directory");
            write_params(&dir.join("final_params.bin"), &self.cfg.net_spec(), &params)?;
            if let Some(p) = secondary_params.as_deref() {
                write_params(&dir.join("secondary_params.bin"), &self.cfg.net_spec(), p)?;
            }
            write_summary(&dir.join("summary.toml"), &summary)?;
        }
        Ok(RunOutcome {
            summary,
            params,
            secondary_params,
            records: self.records,
        })
    }
}

/// A DQN-family learner that never acts: it trains on minibatches drawn from
/// the primary learner's replay buffer with its own batch size.
pub struct SecondaryLearner {
    net: Network,
    params: Vec<f64>,
    target: Vec<f64>,
    core: UpdateCore,
    support: Option<Support<f64>>,
    rng: ChaCha8Rng,
    batch_size: usize,
    updates_per_cycle: usize,
    updates: u64,
}

impl SecondaryLearner {
    pub fn new(cfg: &ExperimentConfig, primary: &LearnerUnit) -> Result<Self> {
        let Some(sc) = &cfg.secondary else {
            return config_err("no secondary learner configured");
        };
        let net = primary.net().clone();
        let params = if sc.equal_init {
            initial_params(cfg)?
        } else {
            net.init(mix_seed(cfg.seed, 8)).into_inner()
        };
        let b = cfg.sims_per_learner();
        let u = updates_per_cycle(b, cfg.algo.horizon, sc.batch_size, cfg.algo.intensity())?;
        let rng_seed = if sc.shared_rng {
            primary.train_seed()
        } else {
            mix_seed(cfg.seed, 4000)
        };
        Ok(SecondaryLearner {
            core: UpdateCore::new(&net, learner_rule(cfg, sc.batch_size), cfg.telemetry.norm_every_updates),
            target: params.clone(),
            params,
            support: make_support(cfg)?,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            batch_size: sc.batch_size,
            updates_per_cycle: cfg.algo.dqn.max_updates_per_cycle.map_or(u, |cap| u.min(cap)),
            updates: 0,
            net,
        })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn updates_per_cycle(&self) -> usize {
        self.updates_per_cycle
    }

    /// One cycle's worth of updates from `replay`; returns any norm rows.
    pub fn train(&mut self, cfg: &ExperimentConfig, replay: &ReplayBuffer, env_step: u64) -> Result<Vec<NormRow>> {
        let d = &cfg.algo.dqn;
        for _ in 0..self.updates_per_cycle {
            let mb = replay.sample_readonly(self.batch_size, d.n_step, cfg.algo.gamma, &mut self.rng)?;
            let (_, grad) = dqn_grad(&self.net, &self.params, &self.target, self.support.as_ref(), &mb, d.double)?;
            self.core.apply(Link::Local, &mut self.params, &grad, env_step, "secondary")?;
            self.updates += 1;
            if self.updates % d.target_period as u64 == 0 {
                self.target.copy_from_slice(&self.params);
            }
        }
        Ok(std::mem::take(&mut self.core.rows))
    }

    pub fn evaluate(&self, cfg: &ExperimentConfig, seed: u64) -> Result<EvalResult> {
        evaluate_params(cfg, &self.net, &self.params, self.support.as_ref(), seed)
    }
}

/// Driver for the single and synchronous topologies.
pub struct Trainer {
    cfg: ExperimentConfig,
    units: Vec<LearnerUnit>,
    reducer: Reducer,
    secondary: Option<SecondaryLearner>,
    schedule: LinearSchedule,
    monitor: Monitor,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let k = match cfg.topology {
            Topology::Single => 1,
            Topology::Sync { learners } => learners,
            Topology::Async { .. } => return config_err("asynchronous topologies run through run_async"),
        };
        let init = initial_params(cfg)?;
        let mut units = (0..k).map(|id| LearnerUnit::new(cfg, id, &init)).collect::<Result<Vec<_>>>()?;
        let secondary = if cfg.secondary.is_some() {
            units[0].set_name("primary");
            Some(SecondaryLearner::new(cfg, &units[0])?)
        } else {
            None
        };
        Ok(Trainer {
            cfg: cfg.clone(),
            reducer: Reducer::new(k),
            units,
            secondary,
            schedule: epsilon_schedule(cfg),
            monitor: Monitor::new(cfg)?,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn units(&self) -> &[LearnerUnit] {
        &self.units
    }

    pub fn units_mut(&mut self) -> &mut [LearnerUnit] {
        &mut self.units
    }

    pub fn secondary(&self) -> Option<&SecondaryLearner> {
        self.secondary.as_ref()
    }

    pub fn env_steps(&self) -> u64 {
        self.monitor.env_steps
    }

    pub fn updates(&self) -> u64 {
        self.units[0].updates()
    }

    pub fn params(&self) -> &[f64] {
        self.units[0].params()
    }

    /// Online score: mean return of the latest completed training episodes.
    pub fn score(&self) -> Option<f64> {
        self.monitor.scores.score()
    }

    pub fn records(&self) -> &RunRecords {
        &self.monitor.records
    }

    /// Most recent evaluation score.
    pub fn last_eval(&self) -> Option<f64> {
        self.monitor.records.evals.last().and_then(|r| r.score)
    }

    /// One sampling-and-update cycle on every unit.
    pub fn step_cycle(&mut self) -> Result<()> {
        let eps = self.schedule.value(self.monitor.env_steps, self.cfg.total_steps);
        let reports = if self.units.len() == 1 {
            vec![self.units[0].cycle(Link::Local, eps)?]
        } else {
            let reducer = &self.reducer;
            std::thread::scope(|s| {
                let handles: Vec<_> = self
                    .units
                    .iter_mut()
                    .enumerate()
                    .map(|(rank, unit)| {
                        s.spawn(move || {
                            let out = unit.cycle(Link::Sync { reducer, rank }, eps);
                            if out.is_err() {
                                reducer.poison();
                            }
                            out
                        })
                    })
                    .collect();
                let results: Vec<Result<CycleReport>> = handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(Error::Worker("learner thread panicked".into()))))
                    .collect();
                // Report the root failure rather than a peer's poisoned wait.
                let first_err = results.iter().position(|r| matches!(r, Err(e) if !matches!(e, Error::Worker(_))));
                match first_err {
                    Some(i) => Err(results.into_iter().nth(i).expect("index in range").expect_err("is an error")),
                    None => results.into_iter().collect(),
                }
            })?
        };
        let updates = self.units[0].updates();
        self.monitor.observe(&reports, updates)?;
        if let Some(sec) = self.secondary.as_mut() {
            if self.units[0].learning() {
                let replay = self.units[0].replay().expect("secondary needs a dqn primary");
                let rows = sec.train(&self.cfg, replay, self.monitor.env_steps)?;
                self.monitor.push_norms(&rows)?;
            }
        }
        if self.monitor.eval_due() {
            self.evaluate()?;
        }
        Ok(())
    }

    /// Runs an evaluation pause now and records it.
    pub fn evaluate(&mut self) -> Result<EvalResult> {
        let seed = self.monitor.eval_seed();
        let u = &self.units[0];
        let primary = evaluate_params(&self.cfg, u.net(), u.params(), u.support(), seed)?;
        let secondary = self.secondary.as_ref().map(|s| s.evaluate(&self.cfg, seed)).transpose()?;
        self.monitor.push_eval(primary, secondary)?;
        Ok(primary)
    }

    /// Cycles until at least `steps` environment steps have been taken.
    pub fn run_to(&mut self, steps: u64) -> Result<()> {
        while self.monitor.env_steps < steps {
            self.step_cycle()?;
        }
        Ok(())
    }

    /// Writes final records and artifacts.
    pub fn finish(mut self) -> Result<RunOutcome> {
        if evals_enabled(&self.cfg) && self.monitor.last_eval_step() != Some(self.monitor.env_steps) {
            self.evaluate()?;
        }
        let params = self.units[0].params().to_vec();
        let sec = self.secondary.as_ref().map(|s| s.params().to_vec());
        self.monitor.finish(params, sec)
    }

    pub fn run(mut self) -> Result<RunOutcome> {
        self.run_to(self.cfg.total_steps)?;
        self.finish()
    }
}

/// Runs an asynchronous-topology experiment: learner threads claim sampling
/// cycles from a shared step budget and update a chunk-locked store.
pub fn run_async(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let Topology::Async {
        learners,
        chunks,
        local_steps,
        pull_horizon,
    } = cfg.topology
    else {
        return config_err("run_async needs an asynchronous topology");
    };
    let init = initial_params(cfg)?;
    let units = (0..learners).map(|id| LearnerUnit::new(cfg, id, &init)).collect::<Result<Vec<_>>>()?;
    let batch = if cfg.algo.algo.is_policy_gradient() {
        cfg.sims_per_learner() * cfg.algo.horizon
    } else {
        cfg.algo.dqn.batch_size
    };
    let store = CentralStore::new(&init, learner_rule(cfg, batch), chunks)?;
    let net = units[0].net().clone();
    let support = units[0].support().cloned();
    let per_cycle = (cfg.sims_per_learner() * cfg.algo.horizon) as u64;
    let schedule = epsilon_schedule(cfg);
    let claimed = AtomicU64::new(0);
    let stop = AtomicBool::new(false);
    let mut monitor = Monitor::new(cfg)?;
    let mut total_updates = 0;
    let (tx, rx) = mpsc::channel::<Result<CycleReport>>();
    let outcome: Result<()> = std::thread::scope(|s| {
        for mut unit in units {
            let tx = tx.clone();
            let (store, claimed, stop) = (&store, &claimed, &stop);
            s.spawn(move || {
                let link = Link::Async {
                    store,
                    local_steps,
                    pull_horizon,
                };
                while !stop.load(Ordering::SeqCst) {
                    let start = claimed.fetch_add(per_cycle, Ordering::SeqCst);
                    if start >= cfg.total_steps {
                        break;
                    }
                    let out = unit.cycle(link, schedule.value(start, cfg.total_steps));
                    let failed = out.is_err();
                    if tx.send(out).is_err() || failed {
                        return;
                    }
                }
                if let Err(e) = unit.flush(link) {
                    let _ = tx.send(Err(e));
                }
            });
        }
        drop(tx);
        for msg in rx {
            let report = match msg {
                Ok(r) => r,
                Err(e) => {
                    stop.store(true, Ordering::SeqCst);
                    return Err(e);
                }
            };
            total_updates += report.updates;
            monitor.observe(std::slice::from_ref(&report), total_updates)?;
            if monitor.eval_due() {
                let seed = monitor.eval_seed();
                let (params, _) = store.snapshot();
                let r = evaluate_params(cfg, &net, &params, support.as_ref(), seed)?;
                monitor.push_eval(r, None)?;
            }
        }
        Ok(())
    });
    outcome?;
    let (params, _) = store.snapshot();
    if evals_enabled(cfg) && monitor.last_eval_step() != Some(monitor.env_steps) {
        let seed = monitor.eval_seed();
        let r = evaluate_params(cfg, &net, &params, support.as_ref(), seed)?;
        monitor.push_eval(r, None)?;
    }
    monitor.finish(params, None)
}

/// Validates `cfg` and runs it with the topology it names.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    match cfg.topology {
        Topology::Async { .. } => run_async(cfg),
        _ => Trainer::new(cfg)?.run(),
    }
}
