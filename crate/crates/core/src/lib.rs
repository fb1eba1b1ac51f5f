//! Simulation of reinforcement learning against a proxy grader, with
//! expert-budgeted protocols that periodically realign the proxy to a
//! costly expert reward.
//!
//! * [`env`]: tasks, rollout features and the expert reward;
//! * [`policy`]: softmax sequence policy with exact log-probabilities;
//! * [`trainer`]: GRPO-style updates;
//! * [`grading`]: proxy graders and their update modes;
//! * [`metrics`]: advantage correlation, bootstrap intervals, PGR;
//! * [`estimators`]: first-order predictions of expert-reward movement;
//! * [`protocol`]: baselines, realignment loops and the sample ledger;
//! * [`runlog`]: the step-indexed CSV log.

pub mod config;
pub mod env;
pub mod error;
pub mod estimators;
pub mod grading;
pub mod metrics;
pub mod policy;
pub mod protocol;
pub mod rng;
pub mod runlog;
pub mod trainer;

pub use config::ExperimentConfig;
pub use env::{Dataset, Env, EnvConfig, FeatureVector, TaskInstance};
pub use error::{Error, Result};
pub use grading::ProxyGrader;
pub use policy::{PolicyParams, Rollout};
pub use protocol::{run_protocol, Mode, ProtocolConfig, RunOutcome, RunResult};
pub use rng::{Rng, Streams};
pub use runlog::RunLog;
pub use trainer::{Trainer, TrainerConfig};
