//! First-order predictors of how a proxy-driven update moves the expert
//! objective.

use serde::{Deserialize, Serialize};

use crate::env::{Env, TaskInstance};
use crate::error::{Error, Result};
use crate::metrics::PromptGroupedScores;
use crate::policy::PolicyParams;
use crate::rng::Streams;
use crate::trainer::{GroupBatch, StepStats};

/// Unbiased per-group estimate of `∇J_exp`, averaged over groups:
/// `(1/(G−1)) Σ_i (R_i − R̄) ∇log π(y_i)`.
pub fn expert_gradient(policy: &PolicyParams, batch: &GroupBatch, expert: &[Vec<f64>]) -> Result<Vec<f64>> {
    if expert.len() != batch.groups.len() {
        return Err(Error::ShapeMismatch { expected: batch.groups.len(), got: expert.len() });
    }
    let mut grad = vec![0.0; policy.n_params()];
    let n_groups = batch.groups.len() as f64;
    for (g, scores) in batch.groups.iter().zip(expert) {
        if scores.len() != g.rollouts.len() {
            return Err(Error::ShapeMismatch { expected: g.rollouts.len(), got: scores.len() });
        }
        let n = scores.len();
        if n < 2 {
            continue;
        }
        let mean = scores.iter().sum::<f64>() / n as f64;
        for (rollout, &r) in g.rollouts.iter().zip(scores) {
            let c = (r - mean) / ((n - 1) as f64 * n_groups);
            if c != 0.0 {
                let scales = vec![c; rollout.tokens.len()];
                policy.accumulate_grad_logprob(&g.task, &rollout.tokens, &scales, &mut grad)?;
            }
        }
    }
    Ok(grad)
}

/// `∇J_exp · Δθ` with `∇J_exp` estimated from `batch` and its expert scores.
pub fn grad_projection(
    policy: &PolicyParams,
    batch: &GroupBatch,
    expert: &[Vec<f64>],
    delta_theta: &[f64],
) -> Result<f64> {
    if delta_theta.len() != policy.n_params() {
        return Err(Error::ShapeMismatch { expected: policy.n_params(), got: delta_theta.len() });
    }
    let g = expert_gradient(policy, batch, expert)?;
    Ok(g.iter().zip(delta_theta).map(|(a, b)| a * b).sum())
}

/// `η ·` prompt-average of the within-prompt mean of `R_exp · A_pr`.
///
/// `scores` holds `(expert score, proxy advantage)` pairs. With
/// `center_expert` the expert scores are mean-centred per prompt first.
pub fn adv_inner_product(scores: &PromptGroupedScores, eta: f64, center_expert: bool) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for pairs in scores.groups.values() {
        if pairs.is_empty() {
            continue;
        }
        let mean = if center_expert { pairs.iter().map(|p| p.0).sum::<f64>() / pairs.len() as f64 } else { 0.0 };
        total += pairs.iter().map(|&(e, a)| (e - mean) * a).sum::<f64>() / pairs.len() as f64;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        eta * total / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub step: u64,
    pub grad_projection: f64,
    pub adv_inner_product: f64,
    /// `J_exp(θ_step) − J_exp(θ_0)` when measured at this step.
    pub actual_delta: Option<f64>,
}

/// Records both estimators for every step of a run and periodically
/// measures the actual expert-objective change.
///
/// Expert scores are the noiseless ones (oracle mode), so estimator error is
/// not confounded with grading noise.
pub struct EstimateTracker<'a> {
    env: &'a Env,
    eval_tasks: &'a [TaskInstance],
    streams: Streams,
    /// Monte-Carlo rollouts per measurement of `J_exp`.
    pub n_mc: usize,
    /// Measure `actual_delta` every this many steps.
    pub eval_interval: u64,
    /// Step size used by the advantage inner product.
    pub eta: f64,
    j0: Option<f64>,
    pub records: Vec<EstimateRecord>,
}

impl<'a> EstimateTracker<'a> {
    pub fn new(env: &'a Env, eval_tasks: &'a [TaskInstance], streams: Streams, eval_interval: u64, eta: f64) -> Self {
        Self { env, eval_tasks, streams, n_mc: 10_000, eval_interval, eta, j0: None, records: Vec::new() }
    }

    /// Noiseless `J_exp` of `policy`. Every measurement replays the same
    /// stream (common random numbers), so differences carry less noise and
    /// an unchanged policy measures an exactly zero change.
    pub fn measure(&self, policy: &PolicyParams) -> Result<f64> {
        let mut rng = self.streams.rng("estimates", 0);
        Ok(self.env.true_objective(policy, self.eval_tasks, self.n_mc, &mut rng)?.mean)
    }

    /// Sets the reference `J_exp(θ_0)`; call before the first step.
    pub fn start(&mut self, policy: &PolicyParams) -> Result<f64> {
        let j = self.measure(policy)?;
        self.j0 = Some(j);
        Ok(j)
    }

    /// `pre_step` is the policy that sampled `batch`; `post_step` the updated one.
    pub fn observe(
        &mut self,
        pre_step: &PolicyParams,
        post_step: &PolicyParams,
        stats: &StepStats,
        batch: &GroupBatch,
    ) -> Result<&EstimateRecord> {
        let expert: Vec<Vec<f64>> = batch
            .groups
            .iter()
            .map(|g| g.features.iter().map(|f| self.env.expert().noiseless(f)).collect())
            .collect();
        let gp = grad_projection(pre_step, batch, &expert, &stats.delta_theta)?;
        let mut scores = PromptGroupedScores::default();
        for (g, e) in batch.groups.iter().zip(&expert) {
            for (&r, &a) in e.iter().zip(&g.advantages) {
                scores.push(g.task.id, r, a);
            }
        }
        let aip = adv_inner_product(&scores, self.eta, true);
        let actual_delta = if self.eval_interval > 0 && stats.step % self.eval_interval == 0 {
            let j0 = match self.j0 {
                Some(j) => j,
                None => return Err(crate::error::invalid("EstimateTracker::start was not called")),
            };
            Some(self.measure(post_step)? - j0)
        } else {
            None
        };
        self.records.push(EstimateRecord { step: stats.step, grad_projection: gp, adv_inner_product: aip, actual_delta });
        Ok(self.records.last().expect("just pushed"))
    }

    /// Sum of `grad_projection` over records with `step <= up_to`.
    pub fn cumulative_prediction(&self, up_to: u64) -> f64 {
        self.records.iter().filter(|r| r.step <= up_to).map(|r| r.grad_projection).sum()
    }
}
