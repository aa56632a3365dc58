pub mod algos;
pub mod envs;
pub mod error;
pub mod learner;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod sampler;
pub mod telemetry;

/// Flat parameter vector at the runtime precision.
pub type ParamVector = nn::ParamVector<f64>;
/// Gradient vector at the runtime precision.
pub type GradVector = nn::GradVector<f64>;
pub type CentralStore = learner::CentralStore<f64>;
pub type Optimizer = optim::Optimizer<f64>;
pub type Support = algos::Support<f64>;

pub use error::{Error, Result};
pub use learner::{run_experiment, RunOutcome, Trainer};
pub use telemetry::ExperimentConfig;
