//! Algorithm math: returns and advantages, A2C and PPO objectives, DQN and
//! categorical DQN targets and losses, the per-simulator replay buffer,
//! epsilon-greedy exploration, and the training-intensity schedule.

pub mod dqn;
pub mod pg;
pub mod replay;
pub mod returns;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::scalar::Scalar;

pub use dqn::{
    catdqn_target_dists, categorical_project, categorical_project_onto, catdqn_loss_grad, dqn_loss_grad, dqn_targets, expected_q, Support,
};
pub use pg::{a2c_loss_grad, pg_loss_grad, ppo_loss_grad, ppo_update, PgCoefs, PgLossStats, PgSamples};
pub use replay::{NStepBatch, ReplayBuffer, Transition};
pub use returns::{compute_returns_advantages, discounted_returns};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgoKind {
    A2c,
    Ppo,
    Dqn,
    CatDqn,
}

impl AlgoKind {
    /// Reference average number of gradient uses per sampled transition.
    pub fn reference_intensity(self) -> f64 {
        match self {
            AlgoKind::A2c => 1.0,
            AlgoKind::Ppo => 4.0,
            AlgoKind::Dqn | AlgoKind::CatDqn => 8.0,
        }
    }

    pub fn is_policy_gradient(self) -> bool {
        matches!(self, AlgoKind::A2c | AlgoKind::Ppo)
    }

    pub fn name(self) -> &'static str {
        match self {
            AlgoKind::A2c => "a2c",
            AlgoKind::Ppo => "ppo",
            AlgoKind::Dqn => "dqn",
            AlgoKind::CatDqn => "catdqn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub normalize_advantages: bool,
    /// Rescale gradients whose L2 norm exceeds this.
    pub max_grad_norm: Option<f64>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip: 0.2,
            epochs: 4,
            minibatches: 4,
            normalize_advantages: true,
            max_grad_norm: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DqnConfig {
    pub batch_size: usize,
    /// Gradient updates between target-network copies.
    pub target_period: usize,
    pub n_step: usize,
    pub double: bool,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of the run over which epsilon decays linearly.
    pub eps_fraction: f64,
    pub replay_capacity: usize,
    /// Learning starts once this many batches' worth of valid transitions exist.
    pub min_history_batches: usize,
    pub max_updates_per_cycle: Option<usize>,
    /// When set, Adam's epsilon becomes `adam_eps_coef / batch_size`.
    pub adam_eps_coef: Option<f64>,
}

impl Default for DqnConfig {
    fn default() -> Self {
        DqnConfig {
            batch_size: 32,
            target_period: 250,
            n_step: 1,
            double: true,
            eps_start: 1.0,
            eps_end: 0.01,
            eps_fraction: 0.1,
            replay_capacity: 100_000,
            min_history_batches: 10,
            max_updates_per_cycle: None,
            adam_eps_coef: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CatDqnConfig {
    pub atoms: usize,
    /// Support bounds; derived from the environment's return bounds when unset.
    pub v_min: Option<f64>,
    pub v_max: Option<f64>,
}

impl Default for CatDqnConfig {
    fn default() -> Self {
        CatDqnConfig {
            atoms: 51,
            v_min: None,
            v_max: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgoConfig {
    pub algo: AlgoKind,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Sampling horizon T per optimization cycle.
    pub horizon: usize,
    #[serde(default = "default_entropy")]
    pub entropy_coef: f64,
    #[serde(default = "default_value")]
    pub value_coef: f64,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub dqn: DqnConfig,
    #[serde(default)]
    pub catdqn: CatDqnConfig,
    /// Defaults to the algorithm's reference intensity.
    #[serde(default)]
    pub training_intensity: Option<f64>,
}

fn default_gamma() -> f64 {
    0.99
}
fn default_entropy() -> f64 {
    0.01
}
fn default_value() -> f64 {
    0.5
}

impl AlgoConfig {
    pub fn new(algo: AlgoKind, horizon: usize) -> Self {
        AlgoConfig {
            algo,
            gamma: default_gamma(),
            horizon,
            entropy_coef: default_entropy(),
            value_coef: default_value(),
            ppo: PpoConfig::default(),
            dqn: DqnConfig::default(),
            catdqn: CatDqnConfig::default(),
            training_intensity: None,
        }
    }

    pub fn intensity(&self) -> f64 {
        self.training_intensity
            .unwrap_or_else(|| self.algo.reference_intensity())
    }

    pub fn pg_coefs(&self) -> PgCoefs {
        PgCoefs {
            entropy_coef: self.entropy_coef,
            value_coef: self.value_coef,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return config_err("gamma must lie in (0, 1]");
        }
        if self.horizon == 0 {
            return config_err("horizon must be >= 1");
        }
        if !(self.intensity() > 0.0) {
            return config_err("training intensity must be positive");
        }
        match self.algo {
            AlgoKind::Ppo => {
                let p = &self.ppo;
                if !(p.clip > 0.0 && p.clip < 1.0) {
                    return config_err("ppo clip must lie in (0, 1)");
                }
                if p.epochs == 0 || p.minibatches == 0 {
                    return config_err("ppo needs epochs >= 1 and minibatches >= 1");
                }
            }
            AlgoKind::Dqn | AlgoKind::CatDqn => {
                let d = &self.dqn;
                if d.batch_size == 0 || d.n_step == 0 || d.target_period == 0 {
                    return config_err("dqn needs batch_size, n_step, target_period >= 1");
                }
                if !(0.0..=1.0).contains(&d.eps_start) || !(0.0..=1.0).contains(&d.eps_end) {
                    return config_err("epsilon schedule values must lie in [0, 1]");
                }
                if self.algo == AlgoKind::CatDqn {
                    let c = &self.catdqn;
                    if c.atoms < 2 {
                        return config_err("categorical dqn needs at least 2 atoms");
                    }
                    if let (Some(lo), Some(hi)) = (c.v_min, c.v_max) {
                        if !(lo < hi) {
                            return config_err("catdqn v_min must be below v_max");
                        }
                    }
                }
            }
            AlgoKind::A2c => {}
        }
        Ok(())
    }
}

/// Greedy action with lowest-index tie-break, or a uniform action with
/// probability `eps`.
pub fn epsilon_greedy<T: Scalar, R: Rng>(q_row: &[T], eps: f64, rng: &mut R) -> usize {
    if eps > 0.0 && rng.random::<f64>() < eps {
        return rng.random_range(0..q_row.len());
    }
    argmax(q_row)
}

/// Index of the first maximum.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Linear decay from `start` to `end` over the first `fraction` of `total`
/// steps, constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearSchedule {
    pub start: f64,
    pub end: f64,
    pub fraction: f64,
}

impl LinearSchedule {
    pub fn value(&self, step: u64, total: u64) -> f64 {
        let span = (self.fraction * total as f64).max(1.0);
        let frac = (step as f64 / span).min(1.0);
        self.start + (self.end - self.start) * frac
    }
}

/// Gradient updates per sampling cycle that keep the training intensity
/// `I = L * updates / (B * T)`: `round(I * B * T / L)`.
pub fn updates_per_cycle(simulators: usize, horizon: usize, batch: usize, intensity: f64) -> Result<usize> {
    if batch == 0 {
        return config_err("training batch size must be >= 1");
    }
    let updates = (intensity * (simulators * horizon) as f64 / batch as f64).round();
    if updates < 1.0 {
        return config_err(format!(
            "intensity {intensity} with {simulators} simulators x horizon {horizon} and batch {batch} gives no updates per cycle"
        ));
    }
    Ok(updates as usize)
}
