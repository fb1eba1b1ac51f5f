//! GRPO-style trainer: group-normalised advantages, token-level loss
//! normalisation, ratio clipping, global gradient-norm clipping and Adam.

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::env::{Env, FeatureVector, TaskInstance};
use crate::error::{invalid, Error, Result};
use crate::grading::ProxyGrader;
use crate::policy::{PolicyParams, Rollout};
use crate::rng::{Rng, Streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Adam step size, sized for a policy of a few hundred parameters.
    pub learning_rate: f64,
    pub group_size: usize,
    pub batch_prompts: usize,
    pub clip_eps: f64,
    pub grad_clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub kl_penalty: f64,
    pub advantage_std_floor: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            group_size: 8,
            batch_prompts: 8,
            clip_eps: 0.2,
            grad_clip_norm: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            kl_penalty: 0.0,
            advantage_std_floor: 1e-6,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(invalid("trainer.group_size must be >= 2"));
        }
        if self.batch_prompts < 1 {
            return Err(invalid("trainer.batch_prompts must be >= 1"));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(invalid("trainer.clip_eps must be in (0, 1)"));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(invalid("trainer.learning_rate must be non-negative"));
        }
        if !(self.grad_clip_norm > 0.0 && self.advantage_std_floor > 0.0) {
            return Err(invalid("trainer.grad_clip_norm and trainer.advantage_std_floor must be positive"));
        }
        if !(self.kl_penalty >= 0.0) {
            return Err(invalid("trainer.kl_penalty must be non-negative"));
        }
        Ok(())
    }
}

/// `(r_i − mean) / max(std, floor)` with the population standard deviation.
/// A constant group yields all zeros.
pub fn compute_advantages(rewards: &[f64], std_floor: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let denom = std.max(std_floor);
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

/// Scores rollouts during training.
pub trait RewardModel {
    fn reward(&mut self, task: &TaskInstance, rollout: &Rollout, features: &FeatureVector, rng: &mut Rng) -> Result<f64>;
}

impl<F> RewardModel for F
where
    F: FnMut(&TaskInstance, &Rollout, &FeatureVector, &mut Rng) -> Result<f64>,
{
    fn reward(&mut self, task: &TaskInstance, rollout: &Rollout, features: &FeatureVector, rng: &mut Rng) -> Result<f64> {
        self(task, rollout, features, rng)
    }
}

/// Proxy grader averaged over `n_traces` grading traces.
pub struct ProxyReward<'a> {
    pub grader: &'a ProxyGrader,
    pub n_traces: usize,
}

impl RewardModel for ProxyReward<'_> {
    fn reward(&mut self, task: &TaskInstance, _rollout: &Rollout, features: &FeatureVector, rng: &mut Rng) -> Result<f64> {
        Ok(self.grader.proxy_grade(task.id, features, self.n_traces, rng)?.score)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub task: TaskInstance,
    pub rollouts: Vec<Rollout>,
    pub features: Vec<FeatureVector>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupBatch {
    pub groups: Vec<RolloutGroup>,
    pub total_tokens: usize,
}

impl GroupBatch {
    pub fn mean_reward(&self) -> f64 {
        let (s, n) = self
            .groups
            .iter()
            .flat_map(|g| &g.rewards)
            .fold((0.0, 0usize), |(s, n), r| (s + r, n + 1));
        s / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Norm of the gradient handed to Adam.
    pub clipped_grad_norm: f64,
    pub mean_reward: f64,
    pub token_count: usize,
    #[serde(skip)]
    pub delta_theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Parameter change for one descent step on `grad`.
    pub fn delta(&mut self, grad: &[f64], cfg: &TrainerConfig) -> Vec<f64> {
        self.t += 1;
        let bc1 = 1.0 - cfg.adam_beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.adam_beta2.powi(self.t as i32);
        grad.iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|(&g, (m, v))| {
                *m = cfg.adam_beta1 * *m + (1.0 - cfg.adam_beta1) * g;
                *v = cfg.adam_beta2 * *v + (1.0 - cfg.adam_beta2) * g * g;
                -cfg.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + cfg.adam_eps)
            })
            .collect()
    }
}

/// Clipped-surrogate loss and its gradient with respect to the policy weights.
///
/// Per token: `min(r_t·A, clip(r_t, 1−ε, 1+ε)·A)` with `r_t` the ratio of
/// current to sampling-time token probability; summed over every token in
/// the batch and divided by the batch token count. With `kl_penalty > 0` the
/// exact per-step `KL(π_θ ‖ π_ref)` at each visited prefix is added.
pub fn surrogate_gradient(
    policy: &PolicyParams,
    batch: &GroupBatch,
    config: &TrainerConfig,
    reference: Option<&PolicyParams>,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; policy.n_params()];
    let mut objective = 0.0;
    let mut kl_total = 0.0;
    let t_norm = batch.total_tokens as f64;
    for g in &batch.groups {
        for (rollout, &adv) in g.rollouts.iter().zip(&g.advantages) {
            let current = policy.token_logprobs(&g.task, &rollout.tokens)?;
            let mut scales = Vec::with_capacity(current.len());
            for (lp, old) in current.iter().zip(&rollout.logprobs) {
                let r = (lp - old).exp();
                let clipped = r.clamp(1.0 - config.clip_eps, 1.0 + config.clip_eps);
                let (a, b) = (r * adv, clipped * adv);
                objective += a.min(b);
                // The unclipped branch carries the gradient when it is the minimum.
                scales.push(if a <= b { -adv * r / t_norm } else { 0.0 });
            }
            if adv != 0.0 {
                policy.accumulate_grad_logprob(&g.task, &rollout.tokens, &scales, &mut grad)?;
            }
            if config.kl_penalty > 0.0 {
                let reference = reference.ok_or_else(|| invalid("kl_penalty needs a reference policy"))?;
                kl_total += kl_grad(policy, reference, &g.task, &rollout.tokens, config.kl_penalty / t_norm, &mut grad);
            }
        }
    }
    let loss = -objective / t_norm + config.kl_penalty * kl_total / t_norm;
    Ok((loss, grad))
}

/// Adds `scale · ∇ Σ_t KL_t` to `grad`, returns `Σ_t KL_t`.
fn kl_grad(
    policy: &PolicyParams,
    reference: &PolicyParams,
    task: &TaskInstance,
    tokens: &[usize],
    scale: f64,
    grad: &mut [f64],
) -> f64 {
    let mut total = 0.0;
    let mut prev = None;
    for &y in tokens {
        let p = policy.next_token_probs(&task.context, prev);
        let q = reference.next_token_probs(&task.context, prev);
        let kl: f64 = p.iter().zip(&q).map(|(a, b)| if *a > 0.0 { a * (a.ln() - b.ln()) } else { 0.0 }).sum();
        let dz: Vec<f64> = p.iter().zip(&q).map(|(a, b)| scale * a * (a.ln() - b.ln() - kl)).collect();
        policy.backprop_logits(&task.context, prev, &dz, grad);
        total += kl;
        prev = Some(y);
    }
    total
}

pub struct Trainer {
    pub config: TrainerConfig,
    pub policy: PolicyParams,
    pub adam: Adam,
    reference: Option<PolicyParams>,
}

impl Trainer {
    pub fn new(config: TrainerConfig, policy: PolicyParams) -> Result<Trainer> {
        config.validate()?;
        let reference = (config.kl_penalty > 0.0).then(|| policy.clone());
        let adam = Adam::new(policy.n_params());
        Ok(Trainer { config, policy, adam, reference })
    }

    /// Samples a group per prompt and scores it with `reward`.
    pub fn collect(
        &self,
        env: &Env,
        tasks: &[&TaskInstance],
        reward: &mut dyn RewardModel,
        rng: &mut Rng,
    ) -> Result<GroupBatch> {
        let g = self.config.group_size;
        let mut batch = GroupBatch::default();
        for &task in tasks {
            let rollouts: Vec<Rollout> = (0..g).map(|_| self.policy.sample(task, rng)).collect();
            let features = rollouts
                .iter()
                .map(|r| env.extract_features(task, &r.tokens))
                .collect::<Result<Vec<_>>>()?;
            let rewards = rollouts
                .iter()
                .zip(&features)
                .map(|(r, f)| reward.reward(task, r, f, rng))
                .collect::<Result<Vec<_>>>()?;
            let advantages = compute_advantages(&rewards, self.config.advantage_std_floor);
            batch.total_tokens += rollouts.iter().map(|r| r.tokens.len()).sum::<usize>();
            batch.groups.push(RolloutGroup { task: task.clone(), rollouts, features, rewards, advantages });
        }
        Ok(batch)
    }

    /// One optimizer update on an already collected batch.
    pub fn apply(&mut self, batch: &GroupBatch) -> Result<StepStats> {
        let (loss, mut grad) = surrogate_gradient(&self.policy, batch, &self.config, self.reference.as_ref())?;
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NumericDivergence);
        }
        if grad_norm > self.config.grad_clip_norm {
            let s = self.config.grad_clip_norm / grad_norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        let clipped_grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let mut adam = self.adam.clone();
        let delta = adam.delta(&grad, &self.config);
        if delta.iter().any(|d| !d.is_finite()) {
            return Err(Error::NumericDivergence);
        }
        self.adam = adam;
        self.policy.weights.iter_mut().zip(&delta).for_each(|(w, d)| *w += d);
        self.policy.step += 1;
        Ok(StepStats {
            step: self.policy.step,
            loss,
            grad_norm,
            clipped_grad_norm,
            mean_reward: batch.mean_reward(),
            token_count: batch.total_tokens,
            delta_theta: delta,
        })
    }

    /// Sample, grade, update.
    pub fn step(
        &mut self,
        env: &Env,
        tasks: &[&TaskInstance],
        reward: &mut dyn RewardModel,
        rng: &mut Rng,
    ) -> Result<(StepStats, GroupBatch)> {
        let batch = self.collect(env, tasks, reward, rng)?;
        let stats = self.apply(&batch)?;
        Ok((stats, batch))
    }
}

/// Draws `batch_prompts` distinct prompts for step `step`.
pub fn batch_tasks<'a>(tasks: &'a [TaskInstance], n: usize, rng: &mut Rng) -> Vec<&'a TaskInstance> {
    let n = n.min(tasks.len());
    sample_indices(rng, tasks.len(), n).into_iter().map(|i| &tasks[i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HookAction {
    Continue,
    Stop,
}

/// Observer invoked after every training step.
pub trait TrainHook {
    fn after_step(&mut self, trainer: &Trainer, stats: &StepStats, batch: &GroupBatch) -> Result<HookAction>;
}

impl<F> TrainHook for F
where
    F: FnMut(&Trainer, &StepStats, &GroupBatch) -> Result<HookAction>,
{
    fn after_step(&mut self, trainer: &Trainer, stats: &StepStats, batch: &GroupBatch) -> Result<HookAction> {
        self(trainer, stats, batch)
    }
}

/// Per-step history of a [`train`] call, kept even when a step fails.
#[derive(Debug, Default)]
pub struct TrainRun {
    pub stats: Vec<StepStats>,
    pub error: Option<Error>,
}

/// Runs up to `n_steps` updates on prompts drawn from `tasks`.
///
/// Step `k` draws its prompts from stream `("batch", k)` and its rollouts and
/// grades from `("rollouts", k)`, so runs are reproducible from `streams`.
pub fn train(
    trainer: &mut Trainer,
    env: &Env,
    tasks: &[TaskInstance],
    reward: &mut dyn RewardModel,
    n_steps: u64,
    streams: &Streams,
    hook: &mut dyn TrainHook,
) -> TrainRun {
    let mut run = TrainRun::default();
    for _ in 0..n_steps {
        let k = trainer.policy.step;
        let prompts = batch_tasks(tasks, trainer.config.batch_prompts, &mut streams.rng("batch", k));
        let mut rng = streams.rng("rollouts", k);
        let outcome = trainer
            .step(env, &prompts, reward, &mut rng)
            .and_then(|(stats, batch)| hook.after_step(trainer, &stats, &batch).map(|a| (stats, a)));
        match outcome {
            Ok((mut stats, action)) => {
                stats.delta_theta = Vec::new();
                run.stats.push(stats);
                if action == HookAction::Stop {
                    break;
                }
            }
            Err(e) => {
                run.error = Some(e);
                break;
            }
        }
    }
    run
}
