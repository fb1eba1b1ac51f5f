//! Training protocols: the expert and proxy baselines, the in-context
//! realignment loop, the distillation loop and from-scratch retraining,
//! all accounting for every expert grade in a [`BudgetLedger`].
//!
//! Sample counts in [`ProtocolConfig`] are unscaled and are multiplied by
//! the experiment's `scale_factor`; step counts are used as given.
//!
//! Expert reward reported in the run log is the noiseless objective of the
//! current policy measured by Monte Carlo on the validation prompts. It is an
//! analysis quantity and never drives a protocol decision; decisions use
//! only ledgered expert grades.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::env::{Env, Estimate, FeatureVector, TaskInstance};
use crate::error::{invalid, Error, Result};
use crate::estimators::{EstimateRecord, EstimateTracker};
use crate::grading::{
    baseline_grader, ensemble_top_k, update_distill, update_fewshot, update_per_task, update_rubric, BufferEntry,
    DistillMode, FeatureView, GradeRecord, GradedSample, ProxyGrader, ReplayBuffer, RubricOptions, Split,
    ValidationSample,
};
use crate::metrics::{alignment_report, over_optimization_check, AlignmentReport, OverOptDecision, PromptGroupedScores};
use crate::policy::{PolicyParams, Rollout};
use crate::rng::{Rng, Streams};
use crate::runlog::{Event, RunLog, RunRow};
use crate::trainer::{compute_advantages, train, GroupBatch, HookAction, ProxyReward, RewardModel, StepStats, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ExpertBaseline,
    ProxyBaseline,
    IclLoop,
    FtLoop,
    RetrainScratch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Random,
    MaxVariance,
    MaxDisagreement,
}

/// How the in-context loop builds candidate graders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IclUpdate {
    Rubric,
    Fewshot,
    PerTaskRubric,
    PerTaskFewshot,
}

/// Distillation loop schedule. Sample counts are unscaled; the default is
/// the heavy schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FtSchedule {
    /// Base-policy samples for the initial fit.
    pub init_samples: usize,
    /// RL steps between grader updates.
    pub steps_per_iter: u64,
    /// Fresh samples per grader update.
    pub samples_per_iter: usize,
    pub epochs: usize,
    pub iterations: usize,
}

impl Default for FtSchedule {
    fn default() -> Self {
        Self { init_samples: 20_000, steps_per_iter: 200, samples_per_iter: 10_000, epochs: 3, iterations: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub mode: Mode,
    /// RL steps for every mode except `ft_loop` (which uses its schedule).
    pub total_steps: u64,
    /// Steps between run-log rows (and over-optimization checks for the
    /// proxy baseline and retraining).
    pub checkpoint_interval: u64,
    /// Feedback samples per candidate grader (N).
    pub n_feedback: usize,
    /// Validation samples for ranking candidates (M, unscaled).
    pub m_validation: usize,
    /// Rollouts per validation prompt ("50 prompts × 16").
    pub validation_group: usize,
    pub n_search: usize,
    pub k: usize,
    /// Steps per leg of the in-context loop (S).
    pub leg_steps: u64,
    /// Proxy grading traces averaged per reward (n).
    pub n_traces: usize,
    /// Expert samples per over-optimization check (unscaled).
    pub n_check: usize,
    /// Fresh expert-graded samples per realignment, the selection pool (unscaled).
    pub fresh_samples: usize,
    pub selection: Selection,
    pub icl_update: IclUpdate,
    pub ft: FtSchedule,
    pub distill_mode: DistillMode,
    /// Grader snapshot retrained against in `retrain_scratch`.
    pub retrain_iteration: usize,
    /// Keep training after the proxy baseline's stopping rule fires.
    pub run_past_stop: bool,
    /// Optional cap on protocol expert grades.
    pub budget_cap: Option<u64>,
    /// Monte-Carlo rollouts per expert-objective measurement.
    pub eval_n_mc: usize,
    /// Validation prompts and rollouts per prompt for the logged ρ.
    pub rho_prompts: usize,
    pub rho_group: usize,
    pub bootstrap_samples: usize,
    /// Record first-order estimates every step.
    pub track_estimates: bool,
    pub estimate_interval: u64,
    pub estimate_n_mc: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            mode: Mode::ProxyBaseline,
            total_steps: 1000,
            checkpoint_interval: 50,
            n_feedback: 10,
            m_validation: 800,
            validation_group: 16,
            n_search: 20,
            k: 3,
            leg_steps: 50,
            n_traces: 6,
            n_check: 100,
            fresh_samples: 160,
            selection: Selection::Random,
            icl_update: IclUpdate::Rubric,
            ft: FtSchedule::default(),
            distill_mode: DistillMode::FullTrace,
            retrain_iteration: 1,
            run_past_stop: false,
            budget_cap: None,
            eval_n_mc: 2000,
            rho_prompts: 16,
            rho_group: 8,
            bootstrap_samples: 200,
            track_estimates: false,
            estimate_interval: 50,
            estimate_n_mc: 10_000,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_feedback", self.n_feedback),
            ("m_validation", self.m_validation),
            ("n_search", self.n_search),
            ("k", self.k),
            ("n_traces", self.n_traces),
            ("n_check", self.n_check),
            ("fresh_samples", self.fresh_samples),
            ("eval_n_mc", self.eval_n_mc),
            ("rho_prompts", self.rho_prompts),
            ("ft.init_samples", self.ft.init_samples),
            ("ft.samples_per_iter", self.ft.samples_per_iter),
            ("ft.epochs", self.ft.epochs),
            ("ft.iterations", self.ft.iterations),
            ("estimate_n_mc", self.estimate_n_mc),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(invalid(format!("protocol.{name} must be >= 1")));
            }
        }
        if self.k > self.n_search {
            return Err(invalid("protocol.k must not exceed protocol.n_search"));
        }
        if self.validation_group < 2 || self.rho_group < 2 {
            return Err(invalid("protocol.validation_group and protocol.rho_group must be >= 2"));
        }
        let intervals = [
            ("checkpoint_interval", self.checkpoint_interval),
            ("leg_steps", self.leg_steps),
            ("ft.steps_per_iter", self.ft.steps_per_iter),
            ("estimate_interval", self.estimate_interval),
        ];
        if let Some((name, _)) = intervals.iter().find(|(_, v)| *v < 1) {
            return Err(invalid(format!("protocol.{name} must be >= 1")));
        }
        if self.bootstrap_samples < 100 {
            return Err(invalid("protocol.bootstrap_samples must be >= 100"));
        }
        Ok(())
    }
}

/// Why an expert grade was requested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    /// Grades used to train the policy or fit a grader.
    Feedback,
    /// Grades used only to rank candidate graders.
    Validation,
    OverOptCheck,
    /// Analysis measurements outside the protocol's budget.
    BaselineEval,
}

/// Itemised count of expert grades.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub feedback: u64,
    pub validation: u64,
    pub over_opt_check: u64,
    pub baseline_eval: u64,
}

impl BudgetLedger {
    pub fn charge(&mut self, purpose: Purpose, n: u64) {
        match purpose {
            Purpose::Feedback => self.feedback += n,
            Purpose::Validation => self.validation += n,
            Purpose::OverOptCheck => self.over_opt_check += n,
            Purpose::BaselineEval => self.baseline_eval += n,
        }
    }

    /// Every expert grade, including analysis measurements.
    pub fn total(&self) -> u64 {
        self.feedback + self.validation + self.over_opt_check + self.baseline_eval
    }

    /// Expert grades consumed by the protocol itself.
    pub fn protocol_total(&self) -> u64 {
        self.feedback + self.validation + self.over_opt_check
    }
}

/// A candidate for feedback selection.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolSample {
    pub task_id: u64,
    /// GRPO group this sample was drawn in.
    pub group: usize,
    /// Repeated proxy grades (needed by `max_variance`).
    pub proxy_grades: Vec<f64>,
    /// Expert score (needed by `max_disagreement`).
    pub expert: Option<f64>,
}

/// Indices of the `n` pool samples chosen by `method`.
///
/// * `random`: uniform without replacement;
/// * `max_variance`: top `n` by `stdev(G)/max(mean(G), 1)` over the proxy grades;
/// * `max_disagreement`: top `n` by `|A_pr − A_exp|`, advantages normalised
///   within each group.
///
/// Ranked methods break ties by lower index first.
pub fn select_samples(pool: &[PoolSample], method: Selection, n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n > pool.len() {
        return Err(invalid(format!("cannot select {n} samples from a pool of {}", pool.len())));
    }
    let scores: Vec<f64> = match method {
        Selection::Random => {
            let mut idx: Vec<usize> = (0..pool.len()).collect();
            idx.shuffle(rng);
            idx.truncate(n);
            return Ok(idx);
        }
        Selection::MaxVariance => pool
            .iter()
            .map(|s| {
                if s.proxy_grades.len() < 2 {
                    return Err(invalid("max_variance needs at least two proxy grades per sample"));
                }
                let m = s.proxy_grades.len() as f64;
                let mean = s.proxy_grades.iter().sum::<f64>() / m;
                let var = s.proxy_grades.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (m - 1.0);
                Ok(var.sqrt() / mean.max(1.0))
            })
            .collect::<Result<_>>()?,
        Selection::MaxDisagreement => {
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, s) in pool.iter().enumerate() {
                if s.expert.is_none() {
                    return Err(invalid("max_disagreement needs expert grades for the pool"));
                }
                if s.proxy_grades.is_empty() {
                    return Err(invalid("max_disagreement needs a proxy grade per sample"));
                }
                groups.entry(s.group).or_default().push(i);
            }
            let mut scores = vec![0.0; pool.len()];
            for members in groups.values() {
                let proxy: Vec<f64> = members
                    .iter()
                    .map(|&i| pool[i].proxy_grades.iter().sum::<f64>() / pool[i].proxy_grades.len() as f64)
                    .collect();
                let expert: Vec<f64> = members.iter().map(|&i| pool[i].expert.unwrap_or(0.0)).collect();
                let (ap, ae) = if members.len() < 2 {
                    (vec![0.0], vec![0.0])
                } else {
                    (compute_advantages(&proxy, 1e-6), compute_advantages(&expert, 1e-6))
                };
                for (j, &i) in members.iter().enumerate() {
                    scores[i] = (ap[j] - ae[j]).abs();
                }
            }
            scores
        }
    };
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(n);
    Ok(order)
}

/// A grader as it stood after an update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraderSnapshot {
    pub iteration: usize,
    pub step: u64,
    /// Validation ρ the grader was selected on, when it was ranked.
    pub validation_rho: Option<f64>,
    /// Replay-buffer range the grader was distilled from.
    pub fit_slice: Option<(usize, usize)>,
    pub grader: ProxyGrader,
}

/// Everything a protocol run produced.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub mode: Mode,
    pub log: RunLog,
    pub ledger: BudgetLedger,
    /// Expert objective of the initial policy.
    pub baseline_j: f64,
    /// Expert objective credited to the run.
    pub achieved_j: f64,
    pub achieved_step: u64,
    /// Step at which the over-optimization check first fired.
    pub stopped_at: Option<u64>,
    pub snapshots: Vec<GraderSnapshot>,
    /// Policy at each run-log row, in row order.
    pub checkpoints: Vec<PolicyParams>,
    /// Alignment report of each row that measured one, keyed by step.
    pub alignment: Vec<(u64, AlignmentReport)>,
    pub estimates: Vec<EstimateRecord>,
    pub buffer: ReplayBuffer,
    /// Per-step advantage statistics: (step, max |group mean|, max |group std − 1| over non-zero groups).
    pub advantage_checks: Vec<(u64, f64, f64)>,
    pub warnings: Vec<String>,
    pub final_policy: PolicyParams,
}

impl RunResult {
    /// Row with the highest expert objective (earliest on ties).
    pub fn peak(&self) -> Option<&RunRow> {
        self.log.rows.iter().fold(None, |best: Option<&RunRow>, r| match best {
            Some(b) if b.expert_reward >= r.expert_reward => Some(b),
            _ => Some(r),
        })
    }

    pub fn final_j(&self) -> f64 {
        self.log.rows.last().map(|r| r.expert_reward).unwrap_or(self.baseline_j)
    }
}

/// A run's result plus the error that ended it early, if any.
#[derive(Debug)]
pub struct RunOutcome {
    pub result: RunResult,
    pub error: Option<Error>,
}

/// Shared state of one protocol run.
pub struct Runner<'a> {
    pub cfg: &'a ExperimentConfig,
    pub env: &'a Env,
    pub train_tasks: &'a [TaskInstance],
    pub val_tasks: &'a [TaskInstance],
    pub streams: Streams,
    pub ledger: BudgetLedger,
    pub buffer: ReplayBuffer,
    trainer: Trainer,
    log: RunLog,
    checkpoints: Vec<PolicyParams>,
    alignment: Vec<(u64, AlignmentReport)>,
    snapshots: Vec<GraderSnapshot>,
    advantage_checks: Vec<(u64, f64, f64)>,
    warnings: Vec<String>,
    tracker: Option<EstimateTracker<'a>>,
    pending_rewards: Vec<f64>,
    baseline_j: f64,
}

impl<'a> Runner<'a> {
    pub fn new(
        cfg: &'a ExperimentConfig,
        env: &'a Env,
        train_tasks: &'a [TaskInstance],
        val_tasks: &'a [TaskInstance],
    ) -> Result<Runner<'a>> {
        cfg.validate()?;
        let e = env.config();
        let policy = PolicyParams::zeros(e.vocab, e.length, e.context_dim);
        let trainer = Trainer::new(cfg.trainer.clone(), policy)?;
        let streams = Streams::new(cfg.seed);
        let tracker = cfg.protocol.track_estimates.then(|| {
            let mut t = EstimateTracker::new(
                env,
                val_tasks,
                streams.child("estimates", 0),
                cfg.protocol.estimate_interval,
                cfg.trainer.learning_rate,
            );
            t.n_mc = cfg.protocol.estimate_n_mc;
            t
        });
        let mut runner = Runner {
            cfg,
            env,
            train_tasks,
            val_tasks,
            streams,
            ledger: BudgetLedger::default(),
            buffer: ReplayBuffer::default(),
            trainer,
            log: RunLog::default(),
            checkpoints: Vec::new(),
            alignment: Vec::new(),
            snapshots: Vec::new(),
            advantage_checks: Vec::new(),
            warnings: Vec::new(),
            tracker,
            pending_rewards: Vec::new(),
            baseline_j: 0.0,
        };
        runner.baseline_j = runner.expert_objective()?.mean;
        if let Some(t) = runner.tracker.as_mut() {
            t.start(&runner.trainer.policy)?;
        }
        Ok(runner)
    }

    pub fn policy(&self) -> &PolicyParams {
        &self.trainer.policy
    }

    pub fn step(&self) -> u64 {
        self.trainer.policy.step
    }

    fn scaled(&self, n: usize) -> usize {
        self.cfg.scaled(n)
    }

    /// Noiseless expert objective of the current policy on the validation
    /// prompts. The stream depends only on the step, so runs sharing a seed
    /// evaluate with common random numbers.
    pub fn expert_objective(&self) -> Result<Estimate> {
        let mut rng = self.streams.rng("objective", self.step());
        self.env.true_objective(&self.trainer.policy, self.val_tasks, self.cfg.protocol.eval_n_mc, &mut rng)
    }

    /// One ledgered expert grade.
    pub fn expert_grade(&mut self, purpose: Purpose, features: &FeatureVector, rng: &mut Rng, feedback: bool) -> GradeRecord {
        self.ledger.charge(purpose, 1);
        self.env.expert_grade_features(features, rng, feedback)
    }

    fn budget_allows(&self, extra: usize) -> bool {
        match self.cfg.protocol.budget_cap {
            Some(cap) => self.ledger.protocol_total() + extra as u64 <= cap,
            None => true,
        }
    }

    /// `n` rollouts from the current policy in groups of `group` on prompts
    /// drawn uniformly from `tasks`.
    fn sample_groups(
        &self,
        tasks: &[TaskInstance],
        n: usize,
        group: usize,
        rng: &mut Rng,
    ) -> Result<Vec<(usize, TaskInstance, Rollout, FeatureVector)>> {
        let mut out = Vec::with_capacity(n);
        let mut g = 0;
        while out.len() < n {
            let task = &tasks[rng.random_range(0..tasks.len())];
            for _ in 0..group.min(n - out.len()) {
                let r = self.trainer.policy.sample(task, rng);
                let f = self.env.extract_features(task, &r.tokens)?;
                out.push((g, task.clone(), r, f));
            }
            g += 1;
        }
        Ok(out)
    }

    /// Expert-grades fresh samples into the buffer and returns them.
    fn collect_graded(
        &mut self,
        tasks_split: Split,
        n: usize,
        group: usize,
        purpose: Purpose,
        label: &str,
        index: u64,
    ) -> Result<Vec<(usize, BufferEntry)>> {
        let mut rng = self.streams.rng(label, index);
        let tasks = match tasks_split {
            Split::Train => self.train_tasks,
            Split::Validation => self.val_tasks,
        };
        let samples = self.sample_groups(tasks, n, group, &mut rng)?;
        let step = self.step();
        let mut out = Vec::with_capacity(samples.len());
        for (g, task, rollout, features) in samples {
            let expert = self.expert_grade(purpose, &features, &mut rng, true);
            let entry = BufferEntry { task_id: task.id, split: tasks_split, rollout, features, expert, step };
            self.buffer.push(entry.clone());
            out.push((g, entry));
        }
        Ok(out)
    }

    /// Alignment of `grader` with the expert on fresh validation groups
    /// (analysis measurement, charged to `baseline_eval`).
    fn measure_alignment(&mut self, grader: &ProxyGrader) -> Result<Option<AlignmentReport>> {
        let p = &self.cfg.protocol;
        let step = self.step();
        let mut rng = self.streams.rng("rho", step);
        let samples = self.sample_groups(self.val_tasks, p.rho_prompts * p.rho_group, p.rho_group, &mut rng)?;
        let mut scores = PromptGroupedScores::default();
        for (g, task, _, features) in &samples {
            let e = self.expert_grade(Purpose::BaselineEval, features, &mut rng, false).score;
            let pr = grader.proxy_grade(task.id, features, p.n_traces, &mut rng)?.score;
            // Keyed by group so repeated prompts stay separate groups.
            scores.push(*g as u64, e, pr);
        }
        let mut boot = self.streams.rng("bootstrap", step);
        match alignment_report(&scores, p.bootstrap_samples, 0.9, &mut boot) {
            Ok(r) => Ok(Some(r)),
            Err(Error::NoInformativePrompts) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Appends a run-log row for the current policy.
    fn record(&mut self, event: Event, grader: Option<&ProxyGrader>) -> Result<()> {
        let j = self.expert_objective()?;
        let report = match grader {
            Some(g) => self.measure_alignment(g)?,
            None => None,
        };
        let proxy_reward = if self.pending_rewards.is_empty() {
            None
        } else {
            Some(self.pending_rewards.iter().sum::<f64>() / self.pending_rewards.len() as f64)
        };
        self.pending_rewards.clear();
        let step = self.step();
        self.log.push(RunRow {
            step,
            proxy_reward,
            expert_reward: j.mean,
            expert_se: j.se,
            rho: report.map(|r| r.rho),
            rho_lo: report.map(|r| r.rho_ci.0),
            rho_hi: report.map(|r| r.rho_ci.1),
            expert_samples_used: self.ledger.protocol_total(),
            event,
        })?;
        if let Some(r) = report {
            self.alignment.push((step, r));
        }
        self.checkpoints.push(self.trainer.policy.clone());
        Ok(())
    }

    /// Trains `n_steps` against `reward`.
    fn train_for(&mut self, reward: &mut dyn RewardModel, n_steps: u64) -> Result<()> {
        let streams = self.streams.child("train", 0);
        let tasks = self.train_tasks;
        let env = self.env;
        let mut rewards = Vec::new();
        let mut checks = Vec::new();
        let mut tracker = self.tracker.take();
        let mut prev = self.trainer.policy.clone();
        let mut hook = |t: &Trainer, s: &StepStats, b: &GroupBatch| -> Result<HookAction> {
            rewards.push(s.mean_reward);
            checks.push(advantage_check(s.step, b));
            if let Some(tr) = tracker.as_mut() {
                tr.observe(&prev, &t.policy, s, b)?;
                prev = t.policy.clone();
            }
            Ok(HookAction::Continue)
        };
        let run = train(&mut self.trainer, env, tasks, reward, n_steps, &streams, &mut hook);
        self.tracker = tracker;
        self.pending_rewards.extend(rewards);
        self.advantage_checks.extend(checks);
        match run.error {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Over-optimization check on `n_check` fresh validation samples, added
    /// to the buffer. Returns the estimate of the expert reward.
    fn over_opt_sample(&mut self) -> Result<Estimate> {
        let n = self.scaled(self.cfg.protocol.n_check);
        let entries = self.collect_graded(Split::Validation, n, 2, Purpose::OverOptCheck, "check", self.step())?;
        let scores: Vec<f64> = entries.iter().map(|(_, e)| e.expert.score).collect();
        Ok(Estimate::from_samples(&scores))
    }

    fn finish(self, mode: Mode, achieved: Option<(u64, f64)>, stopped_at: Option<u64>) -> RunResult {
        let (achieved_step, achieved_j) = achieved.unwrap_or_else(|| {
            self.log.rows.last().map(|r| (r.step, r.expert_reward)).unwrap_or((0, self.baseline_j))
        });
        RunResult {
            mode,
            log: self.log,
            ledger: self.ledger,
            baseline_j: self.baseline_j,
            achieved_j,
            achieved_step,
            stopped_at,
            snapshots: self.snapshots,
            checkpoints: self.checkpoints,
            alignment: self.alignment,
            estimates: self.tracker.map(|t| t.records).unwrap_or_default(),
            buffer: self.buffer,
            advantage_checks: self.advantage_checks,
            warnings: self.warnings,
            final_policy: self.trainer.policy,
        }
    }
}

fn advantage_check(step: u64, batch: &GroupBatch) -> (u64, f64, f64) {
    let mut worst_mean: f64 = 0.0;
    let mut worst_std: f64 = 0.0;
    for g in &batch.groups {
        let n = g.advantages.len() as f64;
        let mean = g.advantages.iter().sum::<f64>() / n;
        worst_mean = worst_mean.max(mean.abs());
        if g.advantages.iter().any(|a| *a != 0.0) {
            let std = (g.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
            worst_std = worst_std.max((std - 1.0).abs());
        }
    }
    (step, worst_mean, worst_std)
}

/// Noisy expert grades as the training reward, charged as feedback.
struct ExpertReward<'r> {
    env: &'r Env,
    ledger: &'r mut BudgetLedger,
}

impl RewardModel for ExpertReward<'_> {
    fn reward(&mut self, _task: &TaskInstance, _rollout: &Rollout, features: &FeatureVector, rng: &mut Rng) -> Result<f64> {
        self.ledger.charge(Purpose::Feedback, 1);
        Ok(self.env.expert_grade_features(features, rng, false).score)
    }
}

/// Runs the configured protocol. Retraining needs `snapshots` from a prior
/// distillation run.
pub fn run_protocol(
    cfg: &ExperimentConfig,
    env: &Env,
    snapshots: Option<&[GraderSnapshot]>,
) -> Result<RunOutcome> {
    let data = env.dataset()?;
    let runner = Runner::new(cfg, env, &data.train, &data.validation)?;
    Ok(match cfg.protocol.mode {
        Mode::ExpertBaseline => run_expert_baseline(runner),
        Mode::ProxyBaseline => run_proxy_baseline(runner),
        Mode::IclLoop => run_icl_loop(runner),
        Mode::FtLoop => run_ft_loop(runner),
        Mode::RetrainScratch => {
            let snaps = snapshots.ok_or_else(|| invalid("retrain_scratch needs grader snapshots"))?;
            let snap = snaps
                .iter()
                .find(|s| s.iteration == cfg.protocol.retrain_iteration)
                .ok_or(Error::MissingSnapshot(cfg.protocol.retrain_iteration))?;
            run_retrain_scratch(runner, snap.grader.clone())
        }
    })
}

fn outcome(runner: Runner<'_>, mode: Mode, achieved: Option<(u64, f64)>, stopped: Option<u64>, error: Option<Error>) -> RunOutcome {
    RunOutcome { result: runner.finish(mode, achieved, stopped), error }
}

/// Trains directly on noisy expert grades; the final objective is the PGR
/// maximum.
pub fn run_expert_baseline(mut runner: Runner<'_>) -> RunOutcome {
    let res = (|| -> Result<()> {
        runner.record(Event::Checkpoint, None)?;
        let p = &runner.cfg.protocol;
        let (total, interval) = (p.total_steps, p.checkpoint_interval);
        while runner.step() < total {
            let n = interval.min(total - runner.step());
            let env = runner.env;
            let mut ledger = runner.ledger;
            let mut reward = ExpertReward { env, ledger: &mut ledger };
            let r = runner.train_for(&mut reward, n);
            runner.ledger = ledger;
            r?;
            runner.record(Event::Checkpoint, None)?;
        }
        Ok(())
    })();
    outcome(runner, Mode::ExpertBaseline, None, None, res.err())
}

/// Trains against a fixed grader with periodic over-optimization checks.
/// Credits the checkpoint before the first detected drop.
fn run_against_fixed(mut runner: Runner<'_>, grader: ProxyGrader, mode: Mode) -> RunOutcome {
    let mut achieved = None;
    let mut stopped = None;
    let res = (|| -> Result<()> {
        runner.record(Event::GraderUpdate, Some(&grader))?;
        let mut prev = runner.over_opt_sample()?;
        let mut prev_row = (runner.step(), runner.log.rows[0].expert_reward);
        let p = runner.cfg.protocol.clone();
        while runner.step() < p.total_steps {
            let n = p.checkpoint_interval.min(p.total_steps - runner.step());
            let mut reward = ProxyReward { grader: &grader, n_traces: p.n_traces };
            runner.train_for(&mut reward, n)?;
            if !runner.budget_allows(runner.scaled(p.n_check)) {
                runner.record(Event::Checkpoint, Some(&grader))?;
                break;
            }
            let curr = runner.over_opt_sample()?;
            let noise = curr.se.max(1e-9);
            let decision = over_optimization_check(prev.mean, curr.mean, noise)?;
            let fired = decision == OverOptDecision::Realign;
            runner.record(if fired { Event::Realign } else { Event::Checkpoint }, Some(&grader))?;
            if fired && stopped.is_none() {
                stopped = Some(runner.step());
                achieved = Some(prev_row);
                if !p.run_past_stop {
                    break;
                }
            }
            prev = curr;
            let last = runner.log.rows.last().expect("row just recorded");
            prev_row = (last.step, last.expert_reward);
        }
        Ok(())
    })();
    outcome(runner, mode, achieved, stopped, res.err())
}

/// Proxy baseline: fits the initial grader on scalar grades of base-policy
/// samples, then trains against it.
pub fn run_proxy_baseline(mut runner: Runner<'_>) -> RunOutcome {
    let grader = match initial_grader(&mut runner) {
        Ok(g) => g,
        Err(e) => return outcome(runner, Mode::ProxyBaseline, None, None, Some(e)),
    };
    run_against_fixed(runner, grader, Mode::ProxyBaseline)
}

/// Least-squares grader on the confounded view, charged as feedback.
pub fn initial_grader(runner: &mut Runner<'_>) -> Result<ProxyGrader> {
    let n = runner.scaled(runner.cfg.grading.baseline_fit_samples);
    let mut rng = runner.streams.rng("baseline-fit", 0);
    let (grader, samples) =
        baseline_grader(runner.env, runner.policy(), runner.train_tasks, n, runner.cfg.grading.trace_noise, &mut rng)?;
    runner.ledger.charge(Purpose::Feedback, samples.len() as u64);
    runner.snapshots.push(GraderSnapshot { iteration: 0, step: 0, validation_rho: None, fit_slice: None, grader: grader.clone() });
    Ok(grader)
}

/// Trains a fresh policy against a saved grader for `total_steps`, with no
/// stopping rule; the final objective is credited.
pub fn run_retrain_scratch(mut runner: Runner<'_>, grader: ProxyGrader) -> RunOutcome {
    let res = (|| -> Result<()> {
        runner.record(Event::GraderUpdate, Some(&grader))?;
        let p = runner.cfg.protocol.clone();
        while runner.step() < p.total_steps {
            let n = p.checkpoint_interval.min(p.total_steps - runner.step());
            let mut reward = ProxyReward { grader: &grader, n_traces: p.n_traces };
            runner.train_for(&mut reward, n)?;
            runner.record(Event::Checkpoint, Some(&grader))?;
        }
        Ok(())
    })();
    outcome(runner, Mode::RetrainScratch, None, None, res.err())
}

/// In-context realignment loop.
///
/// Each realignment: fresh expert-graded samples enter the buffer; `n_search`
/// candidates are built from `N` selected samples each; candidates are
/// ranked by ρ on `M` validation samples (recent buffer entries, topped up
/// with fresh validation grades); the top `k` are ensembled. Training then
/// proceeds in legs of `S` steps, each followed by an over-optimization
/// check whose samples join the buffer; a drop triggers realignment.
pub fn run_icl_loop(mut runner: Runner<'_>) -> RunOutcome {
    let res = (|| -> Result<()> {
        let base = initial_grader(&mut runner)?;
        let p = runner.cfg.protocol.clone();
        let mut grader = realign(&mut runner, &base, 1)?;
        runner.record(Event::GraderUpdate, Some(&grader))?;
        let mut prev = runner.over_opt_sample()?;
        let mut iteration = 1;
        while runner.step() < p.total_steps {
            let n = p.leg_steps.min(p.total_steps - runner.step());
            let mut reward = ProxyReward { grader: &grader, n_traces: p.n_traces };
            runner.train_for(&mut reward, n)?;
            if !runner.budget_allows(runner.scaled(p.n_check)) {
                runner.record(Event::Checkpoint, Some(&grader))?;
                runner.warnings.push(format!("budget cap reached at step {}", runner.step()));
                break;
            }
            let curr = runner.over_opt_sample()?;
            let decision = over_optimization_check(prev.mean, curr.mean, curr.se.max(1e-9))?;
            prev = curr;
            if decision == OverOptDecision::Continue {
                runner.record(Event::Checkpoint, Some(&grader))?;
                continue;
            }
            let needed = runner.scaled(p.fresh_samples) + runner.scaled(p.m_validation);
            if !runner.budget_allows(needed) {
                runner.record(Event::Realign, Some(&grader))?;
                runner.warnings.push(format!("budget cap prevents realignment at step {}", runner.step()));
                break;
            }
            iteration += 1;
            grader = realign(&mut runner, &grader, iteration)?;
            runner.record(Event::Realign, Some(&grader))?;
        }
        Ok(())
    })();
    outcome(runner, Mode::IclLoop, None, None, res.err())
}

/// Builds, ranks and ensembles candidate graders from fresh feedback.
fn realign(runner: &mut Runner<'_>, current: &ProxyGrader, iteration: usize) -> Result<ProxyGrader> {
    let p = runner.cfg.protocol.clone();
    let g = runner.cfg.grading.clone();
    let step = runner.step();
    let n_fresh = runner.scaled(p.fresh_samples);
    let group = runner.cfg.trainer.group_size;
    let fresh = runner.collect_graded(Split::Train, n_fresh, group, Purpose::Feedback, "fresh", iteration as u64)?;

    let m = runner.scaled(p.m_validation);
    let mut validation: Vec<ValidationSample> = runner
        .buffer
        .entries()
        .iter()
        .filter(|e| e.split == Split::Validation && e.step == step)
        .map(|e| (e.task_id, e.features.clone(), e.expert.score))
        .collect();
    if validation.len() > m {
        validation.drain(..validation.len() - m);
    }
    if validation.len() < m {
        let extra = m - validation.len();
        let vgroup = p.validation_group;
        let added =
            runner.collect_graded(Split::Validation, extra, vgroup, Purpose::Validation, "validation", iteration as u64)?;
        validation.extend(added.into_iter().map(|(_, e)| (e.task_id, e.features, e.expert.score)));
    }

    let mut sel_rng = runner.streams.rng("selection", iteration as u64);
    let pool: Vec<PoolSample> = fresh
        .iter()
        .map(|(grp, e)| {
            let proxy_grades = match p.selection {
                Selection::MaxVariance => (0..10)
                    .map(|_| current.proxy_grade(e.task_id, &e.features, 1, &mut sel_rng).map(|r| r.score))
                    .collect::<Result<Vec<_>>>(),
                _ => current.deterministic_score(e.task_id, &e.features).map(|s| vec![s]),
            }?;
            Ok(PoolSample { task_id: e.task_id, group: *grp, proxy_grades, expert: Some(e.expert.score) })
        })
        .collect::<Result<_>>()?;
    let samples: Vec<GradedSample> = fresh.iter().map(|(_, e)| e.sample()).collect();
    let per_candidate = match p.icl_update {
        IclUpdate::Fewshot | IclUpdate::PerTaskFewshot => g.fewshot_examples,
        _ => p.n_feedback,
    }
    .min(samples.len());

    let mut candidates = Vec::with_capacity(p.n_search);
    for c in 0..p.n_search {
        let mut rng = runner.streams.rng2("candidate", iteration as u64, c as u64);
        let idx = select_samples(&pool, p.selection, per_candidate, &mut rng)?;
        let records: Vec<GradedSample> = idx.iter().map(|&i| samples[i].clone()).collect();
        let seed = runner.streams.rng2("rubric-seed", iteration as u64, c as u64).random::<u64>();
        let rubric = RubricOptions { seed, ..g.rubric.clone() };
        let cand = match p.icl_update {
            IclUpdate::Rubric => update_rubric(current, &records, &rubric)?,
            IclUpdate::Fewshot => update_fewshot(current, &records, g.fewshot_bandwidth)?,
            IclUpdate::PerTaskRubric => update_per_task(current, &records, |b, r| {
                if r.len() < 2 {
                    Ok(b.clone())
                } else {
                    update_rubric(b, r, &rubric)
                }
            })?,
            IclUpdate::PerTaskFewshot => update_per_task(current, &records, |b, r| update_fewshot(b, r, g.fewshot_bandwidth))?,
        };
        candidates.push(cand);
    }
    let (grader, rhos) = ensemble_top_k(&candidates, &validation, p.k)?;
    let mut sorted: Vec<f64> = rhos.iter().copied().filter(|r| r.is_finite()).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top = sorted.iter().take(p.k).copied().collect::<Vec<_>>();
    let validation_rho = (!top.is_empty()).then(|| top.iter().sum::<f64>() / top.len() as f64);
    runner.snapshots.push(GraderSnapshot { iteration, step, validation_rho, fit_slice: None, grader: grader.clone() });
    Ok(grader)
}

/// Distillation loop: initial fit on base-policy feedback, then fixed-interval
/// refits on fresh on-policy feedback.
pub fn run_ft_loop(mut runner: Runner<'_>) -> RunOutcome {
    let res = (|| -> Result<()> {
        let p = runner.cfg.protocol.clone();
        let opts = runner.cfg.grading.distill.clone();
        let e = runner.env;
        let start = ProxyGrader::linear(FeatureView::confounded(e), e.config().offset, vec![0.0; e.n_features()], runner.cfg.grading.trace_noise);
        let init_n = runner.scaled(p.ft.init_samples);
        let group = runner.cfg.trainer.group_size;
        let from = runner.buffer.len();
        let init = runner.collect_graded(Split::Train, init_n, group, Purpose::Feedback, "ft-samples", 0)?;
        let fit_slice = Some((from, runner.buffer.len()));
        let slice: Vec<GradedSample> = init.iter().map(|(_, e)| e.sample()).collect();
        let fit = update_distill(&start, &slice, p.distill_mode, slice.len(), p.ft.epochs, &opts)?;
        runner.warnings.extend(fit.warning);
        let mut grader = fit.grader;
        runner.snapshots.push(GraderSnapshot { iteration: 0, step: 0, validation_rho: None, fit_slice, grader: grader.clone() });
        runner.record(Event::GraderUpdate, Some(&grader))?;
        for iteration in 1..=p.ft.iterations {
            let leg_end = runner.step() + p.ft.steps_per_iter;
            while runner.step() < leg_end {
                let n = p.checkpoint_interval.min(leg_end - runner.step());
                let mut reward = ProxyReward { grader: &grader, n_traces: p.n_traces };
                runner.train_for(&mut reward, n)?;
                if runner.step() < leg_end {
                    runner.record(Event::Checkpoint, Some(&grader))?;
                }
            }
            if iteration == p.ft.iterations {
                runner.record(Event::Checkpoint, Some(&grader))?;
                break;
            }
            let n = runner.scaled(p.ft.samples_per_iter);
            if !runner.budget_allows(n) {
                runner.record(Event::Checkpoint, Some(&grader))?;
                runner.warnings.push(format!("budget cap reached at step {}", runner.step()));
                break;
            }
            let from = runner.buffer.len();
            let fresh = runner.collect_graded(Split::Train, n, group, Purpose::Feedback, "ft-samples", iteration as u64)?;
            let fit_slice = Some((from, runner.buffer.len()));
            let slice: Vec<GradedSample> = fresh.iter().map(|(_, e)| e.sample()).collect();
            let fit = update_distill(&grader, &slice, p.distill_mode, slice.len(), p.ft.epochs, &opts)?;
            runner.warnings.extend(fit.warning);
            grader = fit.grader;
            let step = runner.step();
            runner.snapshots.push(GraderSnapshot { iteration, step, validation_rho: None, fit_slice, grader: grader.clone() });
            runner.record(Event::GraderUpdate, Some(&grader))?;
        }
        Ok(())
    })();
    outcome(runner, Mode::FtLoop, None, None, res.err())
}
