//! Experiment configuration files.
//!
//! A config is one TOML document with a `version` field. Every field that has
//! a sensible default may be omitted; `to_toml` always writes the full form.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::algos::{AlgoConfig, AlgoKind};
use crate::envs::EnvSpec;
use crate::error::{config_err, Error, Result};
use crate::nn::{Activation, HiddenLayer, Head, NetSpec};
use crate::optim::{AdamHyper, UpdateRule};
use crate::sampler::{SamplerConfig, SimulatedInference};

pub const CONFIG_VERSION: u32 = 1;

/// How learner units are connected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Topology {
    #[default]
    Single,
    /// `learners` units averaging gradients every update.
    Sync { learners: usize },
    /// `learners` units updating a chunk-locked central store.
    Async {
        learners: usize,
        #[serde(default = "default_chunks")]
        chunks: usize,
        /// Local gradient steps between central synchronizations.
        #[serde(default = "default_local_steps")]
        local_steps: usize,
        /// Refresh acting parameters from the store every this many sampling
        /// steps (PPO only).
        #[serde(default)]
        pull_horizon: Option<usize>,
    },
}

fn default_chunks() -> usize {
    3
}
fn default_local_steps() -> usize {
    1
}

impl Topology {
    pub fn learners(&self) -> usize {
        match *self {
            Topology::Single => 1,
            Topology::Sync { learners } | Topology::Async { learners, .. } => learners,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub hidden_width: usize,
    pub hidden_depth: usize,
    pub activation: Activation,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden_width: 64,
            hidden_depth: 2,
            activation: Activation::Tanh,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Environment steps between evaluation pauses (DQN family only).
    pub every_steps: Option<u64>,
    pub steps: usize,
    pub max_path_len: usize,
    pub epsilon: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            every_steps: Some(50_000),
            steps: 5_000,
            max_path_len: 1_000,
            epsilon: 0.001,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TelemetryConfig {
    /// Environment steps between score records.
    pub score_every_steps: u64,
    /// Gradient updates per norm record; `None` disables norm tracking.
    pub norm_every_updates: Option<u64>,
    /// Measure full/half-batch gradient cosines on every A2C update.
    pub cosine_probe: bool,
}

impl Default for TelemetryConfig {
    fn default() -> Self {
        TelemetryConfig {
            score_every_steps: 10_000,
            norm_every_updates: None,
            cosine_probe: false,
        }
    }
}

/// A second DQN learner trained only from the primary's replay buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecondaryConfig {
    pub batch_size: usize,
    /// Draw the secondary's minibatches from a copy of the primary's stream.
    #[serde(default)]
    pub shared_rng: bool,
    #[serde(default = "default_true")]
    pub equal_init: bool,
}

fn default_true() -> bool {
    true
}

/// Throughput sweep for `sample-bench`. Empty lists fall back to the
/// experiment's sampler geometry; points whose `m_per_worker` is not a multiple
/// of `groups` are skipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub n_workers: Vec<usize>,
    pub m_per_worker: Vec<usize>,
    pub groups: Vec<usize>,
    /// Repetitions per point; rows report medians.
    pub seeds: usize,
    pub horizon: usize,
    pub inference: SimulatedInference,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_workers: Vec::new(),
            m_per_worker: Vec::new(),
            groups: Vec::new(),
            seeds: 3,
            horizon: 50,
            inference: SimulatedInference {
                fixed_micros: 0.0,
                per_sample_micros: 0.0,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub total_steps: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub env: EnvSpec,
    pub sampler: SamplerConfig,
    pub algo: AlgoConfig,
    pub optimizer: UpdateRule,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub topology: Topology,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub telemetry: TelemetryConfig,
    #[serde(default)]
    pub secondary: Option<SecondaryConfig>,
    #[serde(default)]
    pub bench: Option<BenchConfig>,
}

impl ExperimentConfig {
    /// Catch with a single learner and per-algorithm defaults that learn
    /// within a few hundred thousand steps.
    pub fn catch_default(algo: AlgoKind) -> Self {
        let (sampler, horizon, optimizer) = match algo {
            AlgoKind::A2c => (SamplerConfig::new(4, 4, 2), 5, UpdateRule::Adam(AdamHyper::new(1e-3))),
            AlgoKind::Ppo => (SamplerConfig::new(4, 2, 2), 32, UpdateRule::Adam(AdamHyper::new(1e-3))),
            AlgoKind::Dqn | AlgoKind::CatDqn => {
                (SamplerConfig::new(4, 4, 2), 4, UpdateRule::Adam(AdamHyper::new(5e-4)))
            }
        };
        let mut algo_cfg = AlgoConfig::new(algo, horizon);
        if algo == AlgoKind::CatDqn {
            algo_cfg.dqn.adam_eps_coef = Some(0.01);
        }
        ExperimentConfig {
            version: CONFIG_VERSION,
            seed: 0,
            total_steps: 500_000,
            out_dir: None,
            env: EnvSpec::catch(),
            sampler,
            algo: algo_cfg,
            optimizer,
            net: NetConfig::default(),
            topology: Topology::Single,
            eval: EvalConfig {
                every_steps: Some(10_000),
                steps: 1_000,
                ..EvalConfig::default()
            },
            telemetry: TelemetryConfig::default(),
            secondary: None,
            bench: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("malformed config: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return config_err(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            ));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn net_spec(&self) -> NetSpec {
        let actions = self.env.action_count();
        let head = match self.algo.algo {
            AlgoKind::A2c | AlgoKind::Ppo => Head::PolicyValue { actions },
            AlgoKind::Dqn => Head::Q { actions },
            AlgoKind::CatDqn => Head::QDist {
                actions,
                atoms: self.algo.catdqn.atoms,
            },
        };
        NetSpec {
            input_dim: self.env.obs_dim(),
            hidden: vec![
                HiddenLayer {
                    width: self.net.hidden_width,
                    activation: self.net.activation,
                };
                self.net.hidden_depth
            ],
            head,
        }
    }

    /// Support bounds for categorical DQN: configured, else the environment's
    /// return range.
    pub fn value_bounds(&self) -> (f64, f64) {
        let (lo, hi) = self.env.return_bounds(self.algo.gamma);
        let c = &self.algo.catdqn;
        let lo = c.v_min.unwrap_or(lo);
        let mut hi = c.v_max.unwrap_or(hi);
        if hi <= lo {
            hi = lo + 1.0;
        }
        (lo, hi)
    }

    /// Simulators feeding one learner unit per sampling cycle.
    pub fn sims_per_learner(&self) -> usize {
        self.sampler.total_sims()
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.sampler.validate()?;
        self.algo.validate()?;
        self.net_spec().validate()?;
        if self.total_steps == 0 {
            return config_err("total_steps must be >= 1");
        }
        if !(self.optimizer.lr() > 0.0) {
            return config_err("learning rate must be positive");
        }
        let b = self.sims_per_learner();
        let t = self.algo.horizon;
        match self.algo.algo {
            AlgoKind::Ppo => {
                if (b * t) % self.algo.ppo.minibatches != 0 {
                    return config_err(format!(
                        "ppo minibatches ({}) must divide the sampled batch {b} x {t}",
                        self.algo.ppo.minibatches
                    ));
                }
            }
            AlgoKind::Dqn | AlgoKind::CatDqn => {
                let d = &self.algo.dqn;
                if d.replay_capacity / b <= d.n_step {
                    return config_err("replay capacity per simulator must exceed n_step");
                }
                crate::algos::updates_per_cycle(b, t, d.batch_size, self.algo.intensity())?;
            }
            AlgoKind::A2c => {}
        }
        match self.topology {
            Topology::Single => {}
            Topology::Sync { learners } => {
                if learners == 0 {
                    return config_err("sync topology needs at least one learner");
                }
            }
            Topology::Async {
                learners,
                chunks,
                local_steps,
                pull_horizon,
            } => {
                if learners == 0 || chunks == 0 || local_steps == 0 {
                    return config_err("async topology needs learners, chunks and local_steps >= 1");
                }
                if chunks > self.net_spec().param_count() {
                    return config_err("more chunks than parameters");
                }
                if let Some(h) = pull_horizon {
                    if self.algo.algo != AlgoKind::Ppo {
                        return config_err("periodic parameter pulls are only defined for ppo");
                    }
                    if h == 0 || t % h != 0 {
                        return config_err(format!("pull_horizon {h} must divide the horizon {t}"));
                    }
                }
            }
        }
        if let Some(s) = &self.secondary {
            if !matches!(self.algo.algo, AlgoKind::Dqn | AlgoKind::CatDqn) {
                return config_err("the secondary learner is defined for the dqn family only");
            }
            if self.topology != Topology::Single {
                return config_err("the secondary learner runs beside a single primary learner");
            }
            crate::algos::updates_per_cycle(b, t, s.batch_size, self.algo.intensity())?;
        }
        if self.eval.every_steps == Some(0) || self.eval.steps == 0 || self.eval.max_path_len == 0 {
            return config_err("evaluation interval, steps and path length must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.eval.epsilon) {
            return config_err("evaluation epsilon must lie in [0, 1]");
        }
        if self.telemetry.score_every_steps == 0 || self.telemetry.norm_every_updates == Some(0) {
            return config_err("telemetry intervals must be >= 1");
        }
        if self.telemetry.cosine_probe && self.algo.algo != AlgoKind::A2c {
            return config_err("the cosine probe is implemented for a2c");
        }
        if let Some(bc) = &self.bench {
            let lists = [&bc.n_workers, &bc.m_per_worker, &bc.groups];
            if bc.seeds == 0 || bc.horizon == 0 || lists.iter().any(|l| l.contains(&0)) {
                return config_err("bench seeds, horizon and sweep values must be >= 1");
            }
            if !(bc.inference.fixed_micros >= 0.0 && bc.inference.per_sample_micros >= 0.0) {
                return config_err("simulated inference times must be non-negative");
            }
        }
        if self.telemetry.cosine_probe && b % 2 != 0 {
            return config_err("the cosine probe splits simulators in halves and needs an even count");
        }
        if let Some(i) = self.algo.training_intensity {
            let implied = match self.algo.algo {
                AlgoKind::A2c => Some(1.0),
                AlgoKind::Ppo => Some(self.algo.ppo.epochs as f64),
                AlgoKind::Dqn | AlgoKind::CatDqn => None,
            };
            if implied.is_some_and(|x| (x - i).abs() > 1e-12) {
                return config_err(format!(
                    "{} intensity is fixed by its update schedule; remove training_intensity or set it to {}",
                    self.algo.algo.name(),
                    implied.unwrap_or_default()
                ));
            }
        }
        Ok(())
    }

    /// Applies command-line overrides.
    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<PathBuf>, steps: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if out.is_some() {
            self.out_dir = out;
        }
        if let Some(s) = steps {
            self.total_steps = s;
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::LatencyDist;
    use crate::optim::RmsPropHyper;
    use proptest::prelude::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        for algo in [AlgoKind::A2c, AlgoKind::Ppo, AlgoKind::Dqn, AlgoKind::CatDqn] {
            let cfg = ExperimentConfig::catch_default(algo);
            cfg.validate().unwrap();
            let text = cfg.to_toml().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg, "{text}");
        }
    }

    #[test]
    fn minimal_file_uses_defaults() {
        let text = r#"
version = 1
total_steps = 1000

[env]
kind = "catch"

[sampler]
n_workers = 2
m_per_worker = 2

[algo]
algo = "a2c"
horizon = 5

[optimizer]
rule = "adam"
lr = 0.001
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.topology, Topology::Single);
        assert_eq!(cfg.sampler.groups, 2);
        assert_eq!(cfg.net, NetConfig::default());
    }

    #[test]
    fn rejects_bad_version_and_syntax() {
        let mut cfg = ExperimentConfig::catch_default(AlgoKind::A2c);
        cfg.version = 7;
        let text = cfg.to_toml().unwrap();
        assert!(ExperimentConfig::from_toml(&text).unwrap_err().is_config());
        assert!(ExperimentConfig::from_toml("version = ").unwrap_err().is_config());
    }

    #[test]
    fn rejects_inconsistent_combinations() {
        let mut cfg = ExperimentConfig::catch_default(AlgoKind::A2c);
        cfg.topology = Topology::Async {
            learners: 2,
            chunks: 3,
            local_steps: 1,
            pull_horizon: Some(5),
        };
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::catch_default(AlgoKind::Ppo);
        cfg.algo.ppo.minibatches = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::catch_default(AlgoKind::A2c);
        cfg.secondary = Some(SecondaryConfig {
            batch_size: 32,
            shared_rng: false,
            equal_init: true,
        });
        assert!(cfg.validate().is_err());
    }

    fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
        (
            0usize..4,
            any::<u64>(),
            1u64..10_000_000,
            (1usize..5, 1usize..4),
            prop_oneof![Just(0usize), Just(1), Just(2)],
            1e-6f64..1.0,
            0.5f64..1.0,
            prop::option::of(0.0f64..2.0),
            any::<bool>(),
        )
            .prop_map(|(a, seed, steps, (n, m), env, lr, gamma, eps, flag)| {
                let algo = [AlgoKind::A2c, AlgoKind::Ppo, AlgoKind::Dqn, AlgoKind::CatDqn][a];
                let mut cfg = ExperimentConfig::catch_default(algo);
                cfg.seed = seed;
                cfg.total_steps = steps;
                cfg.sampler = SamplerConfig::new(n, m * 2, 2);
                cfg.env = match env {
                    0 => EnvSpec::catch(),
                    1 => EnvSpec::pole_balance(),
                    _ => EnvSpec::latency(LatencyDist::LogNormal { mu: lr.ln(), sigma: gamma }),
                };
                cfg.algo.gamma = gamma;
                cfg.algo.catdqn.v_max = eps;
                cfg.algo.training_intensity = eps;
                cfg.optimizer = if flag {
                    UpdateRule::Adam(AdamHyper::new(lr))
                } else {
                    UpdateRule::RmsProp(RmsPropHyper::new(lr))
                };
                if flag {
                    cfg.topology = Topology::Async {
                        learners: n,
                        chunks: m,
                        local_steps: 2,
                        pull_horizon: None,
                    };
                    cfg.out_dir = Some(PathBuf::from(format!("runs/{seed}")));
                }
                cfg
            })
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(cfg in arb_config()) {
            let text = cfg.to_toml().unwrap();
            let back = ExperimentConfig::from_toml(&text).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
