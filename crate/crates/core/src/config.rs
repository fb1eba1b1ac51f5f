//! Experiment configuration shared by the library entry points and the CLI.

use serde::{Deserialize, Serialize};

use crate::env::EnvConfig;
use crate::error::{invalid, Result};
use crate::grading::{DistillOptions, RubricOptions};
use crate::protocol::ProtocolConfig;
use crate::trainer::TrainerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradingConfig {
    /// Standard deviation of one proxy grading trace, in reward points.
    pub trace_noise: f64,
    /// Base-policy samples behind the initial proxy (scaled).
    pub baseline_fit_samples: usize,
    pub rubric: RubricOptions,
    /// Exemplars per few-shot grader.
    pub fewshot_examples: usize,
    pub fewshot_bandwidth: f64,
    pub distill: DistillOptions,
}

impl Default for GradingConfig {
    fn default() -> Self {
        Self {
            trace_noise: 6.0,
            baseline_fit_samples: 4000,
            rubric: RubricOptions::default(),
            fewshot_examples: 5,
            fewshot_bandwidth: 1.0,
            distill: DistillOptions::default(),
        }
    }
}

impl GradingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.trace_noise >= 0.0) {
            return Err(invalid("grading.trace_noise must be non-negative"));
        }
        if self.fewshot_examples < 1 || self.baseline_fit_samples < 1 {
            return Err(invalid("grading.fewshot_examples and grading.baseline_fit_samples must be >= 1"));
        }
        if !(self.fewshot_bandwidth > 0.0) {
            return Err(invalid("grading.fewshot_bandwidth must be positive"));
        }
        if !(self.rubric.ridge > 0.0) || !(self.rubric.jitter >= 0.0) {
            return Err(invalid("grading.rubric needs ridge > 0 and jitter >= 0"));
        }
        if !(self.distill.ridge > 0.0) || !(self.distill.huber_delta > 0.0) || !(self.distill.scalar_weight >= 0.0) {
            return Err(invalid("grading.distill needs ridge > 0, huber_delta > 0, scalar_weight >= 0"));
        }
        Ok(())
    }
}

/// Everything needed to reproduce one protocol run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    /// Multiplier applied to every expert-sample count (`max(1, round(n · s))`).
    pub scale_factor: f64,
    pub env: EnvConfig,
    pub trainer: TrainerConfig,
    pub grading: GradingConfig,
    pub protocol: ProtocolConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scale_factor: 0.1,
            env: EnvConfig::default(),
            trainer: TrainerConfig::default(),
            grading: GradingConfig::default(),
            protocol: ProtocolConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_factor > 0.0 && self.scale_factor.is_finite()) {
            return Err(invalid("scale_factor must be positive"));
        }
        self.env.validate()?;
        self.trainer.validate()?;
        self.grading.validate()?;
        self.protocol.validate()
    }

    /// An unscaled sample count at this run's scale.
    pub fn scaled(&self, n: usize) -> usize {
        scale_count(n, self.scale_factor)
    }
}

/// `max(1, round(n · factor))`.
pub fn scale_count(n: usize, factor: f64) -> usize {
    ((n as f64 * factor).round() as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_rounds_and_floors_at_one() {
        assert_eq!(scale_count(800, 0.1), 80);
        assert_eq!(scale_count(5, 0.1), 1);
        assert_eq!(scale_count(15, 0.1), 2);
        assert_eq!(scale_count(20_000, 0.1), 2000);
    }
}
