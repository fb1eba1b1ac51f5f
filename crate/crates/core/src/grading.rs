//! Proxy graders and the ways they are (re)fitted from expert grades.
//!
//! A proxy never sees the clean feature vector. It sees a [`FeatureView`]:
//! the same features with the first hack feature leaking into the first
//! quality feature (`o_0 = q_1 + c·h_1`) and optionally some entries masked.
//!
//! Update modes:
//!
//! | op | data used | model |
//! |----|-----------|-------|
//! | [`baseline_grader`] | scalar expert scores | least-squares linear |
//! | [`update_rubric`] | feedback decompositions | ridge linear, seeded per-column jitter |
//! | [`update_fewshot`] | exemplar scores | Gaussian-kernel regression |
//! | [`update_distill`] | buffer slice, one of three modes | ridge linear toward the previous weights |
//!
//! All updates are pure: they return a new grader.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{clamp_score, dot, Env, FeatureVector, TaskInstance};
use crate::error::{invalid, Error, Result};
use crate::metrics::{advantage_correlation, PromptGroupedScores};
use crate::policy::{PolicyParams, Rollout};
use crate::rng::Rng;

/// Ridge strength used when an ordinary least-squares fit is singular.
pub const RIDGE_FALLBACK: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradeSource {
    Expert,
    Proxy,
}

/// The simulated natural-language feedback: per-feature contributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub contributions: Vec<f64>,
    pub offset: f64,
    /// `offset + Σ contributions`, before clamping.
    pub noiseless: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeRecord {
    pub score: f64,
    pub feedback: Option<Feedback>,
    pub source: GradeSource,
    pub trace_count: usize,
}

/// An expert-graded sample as used for fitting graders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradedSample {
    pub task_id: u64,
    pub features: FeatureVector,
    pub expert: GradeRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confound {
    /// Observed column receiving the leak.
    pub target: usize,
    /// Feature leaking into `target`.
    pub source: usize,
    pub coef: f64,
}

/// What a proxy observes of a feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureView {
    /// `false` entries are observed as zero.
    pub mask: Vec<bool>,
    pub confound: Option<Confound>,
}

impl FeatureView {
    /// Everything observed, nothing confounded.
    pub fn clean(d: usize) -> FeatureView {
        FeatureView { mask: vec![true; d], confound: None }
    }

    /// The default proxy view of `env`: `o_0 = q_1 + c·h_1`.
    pub fn confounded(env: &Env) -> FeatureView {
        let d = env.n_features();
        let confound = (env.n_features() > env.n_quality() && env.config().confound_coef != 0.0).then(|| Confound {
            target: 0,
            source: env.n_quality(),
            coef: env.config().confound_coef,
        });
        FeatureView { mask: vec![true; d], confound }
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    pub fn observe(&self, features: &FeatureVector) -> Vec<f64> {
        let mut o = features.values.clone();
        if let Some(c) = &self.confound {
            o[c.target] += c.coef * features.values[c.source];
        }
        for (x, &keep) in o.iter_mut().zip(&self.mask) {
            if !keep {
                *x = 0.0;
            }
        }
        o
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub features: FeatureVector,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraderModel {
    Linear { intercept: f64, weights: Vec<f64> },
    Exemplar { exemplars: Vec<Exemplar>, bandwidth: f64 },
    Ensemble { members: Vec<ProxyGrader> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyGrader {
    pub model: GraderModel,
    pub view: FeatureView,
    /// Standard deviation of one grading trace around the deterministic score.
    pub trace_noise: f64,
    /// Task-specific graders overriding `model` for their task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_task: Option<BTreeMap<u64, ProxyGrader>>,
}

impl ProxyGrader {
    pub fn linear(view: FeatureView, intercept: f64, weights: Vec<f64>, trace_noise: f64) -> ProxyGrader {
        ProxyGrader { model: GraderModel::Linear { intercept, weights }, view, trace_noise, per_task: None }
    }

    /// Linear weights, if this is a linear grader.
    pub fn linear_weights(&self) -> Option<(f64, &[f64])> {
        match &self.model {
            GraderModel::Linear { intercept, weights } => Some((*intercept, weights)),
            _ => None,
        }
    }

    /// The single linear grader equivalent to this one: itself, or the
    /// member average of an ensemble of linear graders sharing one view.
    pub fn collapsed_linear(&self) -> Option<(f64, Vec<f64>)> {
        if self.per_task.is_some() {
            return None;
        }
        match &self.model {
            GraderModel::Linear { intercept, weights } => Some((*intercept, weights.clone())),
            GraderModel::Ensemble { members } => {
                let mut b = 0.0;
                let mut w = vec![0.0; self.view.dim()];
                for m in members {
                    if m.view != self.view {
                        return None;
                    }
                    let (mb, mw) = m.collapsed_linear()?;
                    b += mb;
                    w.iter_mut().zip(&mw).for_each(|(a, x)| *a += x);
                }
                let n = members.len() as f64;
                Some((b / n, w.into_iter().map(|x| x / n).collect()))
            }
            GraderModel::Exemplar { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.model {
            GraderModel::Linear { intercept, weights } => {
                if !intercept.is_finite() || weights.iter().any(|w| !w.is_finite()) {
                    return Err(invalid("linear grader weights must be finite"));
                }
                if weights.len() != self.view.dim() {
                    return Err(Error::ShapeMismatch { expected: self.view.dim(), got: weights.len() });
                }
            }
            GraderModel::Exemplar { exemplars, bandwidth } => {
                if exemplars.is_empty() {
                    return Err(Error::NoExemplars);
                }
                if !(*bandwidth > 0.0) {
                    return Err(invalid("bandwidth must be positive"));
                }
            }
            GraderModel::Ensemble { members } => {
                if members.is_empty() {
                    return Err(invalid("ensemble needs at least one member"));
                }
                members.iter().try_for_each(ProxyGrader::validate)?;
            }
        }
        Ok(())
    }

    /// Noise-free score in `[0, 100]`.
    pub fn deterministic_score(&self, task_id: u64, features: &FeatureVector) -> Result<f64> {
        if let Some(g) = self.per_task.as_ref().and_then(|m| m.get(&task_id)) {
            return g.deterministic_score(task_id, features);
        }
        match &self.model {
            GraderModel::Linear { intercept, weights } => {
                let o = self.view.observe(features);
                Ok(clamp_score(intercept + dot(weights, &o)))
            }
            GraderModel::Exemplar { exemplars, bandwidth } => {
                if exemplars.is_empty() {
                    return Err(Error::NoExemplars);
                }
                let o = self.view.observe(features);
                Ok(clamp_score(kernel_regression(&self.view, exemplars, *bandwidth, &o)))
            }
            GraderModel::Ensemble { members } => {
                if members.is_empty() {
                    return Err(invalid("ensemble needs at least one member"));
                }
                let mut sum = 0.0;
                for m in members {
                    sum += m.deterministic_score(task_id, features)?;
                }
                Ok(sum / members.len() as f64)
            }
        }
    }

    /// Mean of `n_traces` noisy grading traces, each clamped to `[0, 100]`.
    pub fn proxy_grade(
        &self,
        task_id: u64,
        features: &FeatureVector,
        n_traces: usize,
        rng: &mut Rng,
    ) -> Result<GradeRecord> {
        if n_traces < 1 {
            return Err(invalid("n_traces must be >= 1"));
        }
        let base = self.deterministic_score(task_id, features)?;
        let score = if self.trace_noise == 0.0 {
            base
        } else {
            (0..n_traces)
                .map(|_| clamp_score(base + self.trace_noise * rng.sample::<f64, _>(StandardNormal)))
                .sum::<f64>()
                / n_traces as f64
        };
        Ok(GradeRecord { score, feedback: None, source: GradeSource::Proxy, trace_count: n_traces })
    }

    /// Convenience wrapper extracting features from a rollout first.
    pub fn grade_rollout(
        &self,
        env: &Env,
        task: &TaskInstance,
        rollout: &Rollout,
        n_traces: usize,
        rng: &mut Rng,
    ) -> Result<GradeRecord> {
        let f = env.extract_features(task, &rollout.tokens)?;
        self.proxy_grade(task.id, &f, n_traces, rng)
    }
}

/// Nadaraya-Watson estimate; weights are a softmax of `−‖o − o_i‖² / 2h²`.
fn kernel_regression(view: &FeatureView, exemplars: &[Exemplar], bandwidth: f64, query: &[f64]) -> f64 {
    let logits: Vec<f64> = exemplars
        .iter()
        .map(|e| {
            let oe = view.observe(&e.features);
            let d2: f64 = oe.iter().zip(query).map(|(a, b)| (a - b).powi(2)).sum();
            -d2 / (2.0 * bandwidth * bandwidth)
        })
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter().zip(exemplars).map(|(w, e)| w * e.score).sum::<f64>() / total
}

/// Weighted ridge regression with an unpenalised intercept, shrinking the
/// slope toward `prior`:
/// `min Σ s_i (y_i − b − v·x_i)² + Σ_k λ_k (v_k − prior_k)²`.
pub(crate) fn weighted_ridge(
    rows: &[Vec<f64>],
    targets: &[f64],
    sample_weights: &[f64],
    lambda: &[f64],
    prior: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let d = lambda.len();
    let p = d + 1;
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    let mut z = vec![0.0; p];
    for ((x, &y), &s) in rows.iter().zip(targets).zip(sample_weights) {
        z[0] = 1.0;
        z[1..].copy_from_slice(x);
        for i in 0..p {
            rhs[i] += s * z[i] * y;
            for j in 0..p {
                a[(i, j)] += s * z[i] * z[j];
            }
        }
    }
    for k in 0..d {
        a[(k + 1, k + 1)] += lambda[k];
        rhs[k + 1] += lambda[k] * prior[k];
    }
    let chol = a.cholesky().ok_or(Error::DegenerateFit)?;
    let sol = chol.solve(&rhs);
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateFit);
    }
    Ok((sol[0], sol.iter().skip(1).cloned().collect()))
}

/// Plain least squares, falling back to ridge `λ = RIDGE_FALLBACK` when the
/// design is singular or badly conditioned.
fn least_squares_with_fallback(rows: &[Vec<f64>], targets: &[f64], d: usize) -> Result<(f64, Vec<f64>)> {
    let ones = vec![1.0; rows.len()];
    let zeros = vec![0.0; d];
    let exact = weighted_ridge(rows, targets, &ones, &zeros, &zeros);
    match exact {
        Ok((b, v)) if v.iter().all(|w| w.abs() < 1e6) => Ok((b, v)),
        _ => weighted_ridge(rows, targets, &ones, &vec![RIDGE_FALLBACK; d], &zeros),
    }
}

/// Fits the initial proxy on scalar expert grades of `n_fit` base-policy rollouts.
///
/// Returns the grader and the samples it consumed (so callers can charge them).
pub fn baseline_grader(
    env: &Env,
    base_policy: &PolicyParams,
    tasks: &[TaskInstance],
    n_fit: usize,
    trace_noise: f64,
    rng: &mut Rng,
) -> Result<(ProxyGrader, Vec<GradedSample>)> {
    let view = FeatureView::confounded(env);
    if n_fit < view.dim() {
        return Err(invalid(format!("n_fit must be >= {} (feature dimension)", view.dim())));
    }
    if tasks.is_empty() {
        return Err(invalid("baseline_grader needs tasks"));
    }
    let mut samples = Vec::with_capacity(n_fit);
    for _ in 0..n_fit {
        let task = &tasks[rng.random_range(0..tasks.len())];
        let rollout = base_policy.sample(task, rng);
        let features = env.extract_features(task, &rollout.tokens)?;
        let expert = env.expert_grade_features(&features, rng, false);
        samples.push(GradedSample { task_id: task.id, features, expert });
    }
    let grader = fit_scalar_linear(view, &samples, trace_noise)?;
    Ok((grader, samples))
}

/// Least-squares linear grader on scalar scores over `view`.
pub fn fit_scalar_linear(view: FeatureView, samples: &[GradedSample], trace_noise: f64) -> Result<ProxyGrader> {
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| view.observe(&s.features)).collect();
    let y: Vec<f64> = samples.iter().map(|s| s.expert.score).collect();
    let (b, v) = least_squares_with_fallback(&rows, &y, view.dim())?;
    Ok(ProxyGrader::linear(view, b, v, trace_noise))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RubricOptions {
    /// Base ridge strength per observed column.
    pub ridge: f64,
    /// Log-normal spread of the per-column ridge strengths.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for RubricOptions {
    fn default() -> Self {
        Self { ridge: 1.0, jitter: 1.0, seed: 0 }
    }
}

fn noiseless_total(s: &GradedSample) -> Result<f64> {
    s.expert
        .feedback
        .as_ref()
        .map(|f| f.offset + f.contributions.iter().sum::<f64>())
        .ok_or_else(|| invalid("record lacks feedback"))
}

/// Refits a linear grader from feedback decompositions.
///
/// Each per-feature contribution is regressed on the observed view; because
/// the design is shared the per-feature fits sum to one fit of the noiseless
/// total. The ridge pulls toward the current grader's weights when it is
/// linear (or an ensemble of linear graders), so columns the records never
/// exercise keep what the grader already knew. The seed draws per-column
/// ridge strengths `ridge · exp(jitter · z_k)`, so different seeds give
/// different rubrics.
pub fn update_rubric(grader: &ProxyGrader, records: &[GradedSample], options: &RubricOptions) -> Result<ProxyGrader> {
    if records.len() < 2 {
        return Err(invalid("rubric update needs at least 2 records"));
    }
    let view = grader.view.clone();
    let d = view.dim();
    let mut rng = crate::rng::Streams::new(options.seed).rng("rubric-jitter", 0);
    let lambda: Vec<f64> = (0..d)
        .map(|_| options.ridge * (options.jitter * rng.sample::<f64, _>(StandardNormal)).exp())
        .collect();
    let rows: Vec<Vec<f64>> = records.iter().map(|s| view.observe(&s.features)).collect();
    let y = records.iter().map(noiseless_total).collect::<Result<Vec<_>>>()?;
    let prior = grader.collapsed_linear().map(|(_, w)| w).unwrap_or_else(|| vec![0.0; d]);
    let (b, v) = weighted_ridge(&rows, &y, &vec![1.0; rows.len()], &lambda, &prior)?;
    Ok(ProxyGrader::linear(view, b, v, grader.trace_noise))
}

/// Exemplar grader from `records` (kernel regression on expert scores).
pub fn update_fewshot(grader: &ProxyGrader, records: &[GradedSample], bandwidth: f64) -> Result<ProxyGrader> {
    if !(bandwidth > 0.0) {
        return Err(invalid("bandwidth must be positive"));
    }
    if records.is_empty() {
        return Err(Error::NoExemplars);
    }
    let exemplars = records.iter().map(|s| Exemplar { features: s.features.clone(), score: s.expert.score }).collect();
    Ok(ProxyGrader {
        model: GraderModel::Exemplar { exemplars, bandwidth },
        view: grader.view.clone(),
        trace_noise: grader.trace_noise,
        per_task: None,
    })
}

/// Per-task variant: one grader per task built by `build` from that task's records.
pub fn update_per_task<F>(grader: &ProxyGrader, records: &[GradedSample], mut build: F) -> Result<ProxyGrader>
where
    F: FnMut(&ProxyGrader, &[GradedSample]) -> Result<ProxyGrader>,
{
    let mut by_task: BTreeMap<u64, Vec<GradedSample>> = BTreeMap::new();
    for r in records {
        by_task.entry(r.task_id).or_default().push(r.clone());
    }
    let mut map = grader.per_task.clone().unwrap_or_default();
    for (task, recs) in by_task {
        let mut base = grader.clone();
        base.per_task = None;
        map.insert(task, build(&base, &recs)?);
    }
    let mut out = grader.clone();
    out.per_task = Some(map);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    FullTrace,
    FeedbackOnly,
    ScalarOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillOptions {
    /// Ridge pulling the slope toward the previous grader's weights.
    pub ridge: f64,
    /// Huber transition point for the scalar-only loss, in reward points.
    pub huber_delta: f64,
    /// Weight of the scalar target relative to the reconstructed total in full-trace mode.
    pub scalar_weight: f64,
}

impl Default for DistillOptions {
    fn default() -> Self {
        Self { ridge: 1e-3, huber_delta: 5.0, scalar_weight: 1.0 / 32.0 }
    }
}

/// Outcome of a distillation update.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillResult {
    pub grader: ProxyGrader,
    /// Set when a scalar-only fit is under-determined (`budget < d`).
    pub warning: Option<String>,
}

/// Fine-tunes a linear grader on the first `budget` samples of `slice`.
///
/// * `FullTrace`: squared loss on the reconstructed noiseless total plus the
///   scalar score with weight `scalar_weight`;
/// * `FeedbackOnly`: squared loss on the reconstructed total only;
/// * `ScalarOnly`: Huber loss on the scalar score, solved by iteratively
///   reweighted least squares, one reweighting pass per epoch.
///
/// The slope is shrunk toward the current grader's weights (toward zero if
/// the current grader is not linear).
pub fn update_distill(
    grader: &ProxyGrader,
    slice: &[GradedSample],
    mode: DistillMode,
    budget: usize,
    epochs: usize,
    options: &DistillOptions,
) -> Result<DistillResult> {
    if budget > slice.len() {
        return Err(invalid(format!("budget {budget} exceeds buffer slice of {}", slice.len())));
    }
    if budget == 0 || epochs == 0 {
        return Err(invalid("budget and epochs must be >= 1"));
    }
    let view = grader.view.clone();
    let d = view.dim();
    let data = &slice[..budget];
    let (prior_b, prior) = match grader.linear_weights() {
        Some((b, w)) => (b, w.to_vec()),
        None => (0.0, vec![0.0; d]),
    };
    let rows: Vec<Vec<f64>> = data.iter().map(|s| view.observe(&s.features)).collect();
    let lambda = vec![options.ridge; d];
    let mut warning = None;
    let (b, v) = match mode {
        DistillMode::FeedbackOnly => {
            let y = data.iter().map(noiseless_total).collect::<Result<Vec<_>>>()?;
            weighted_ridge(&rows, &y, &vec![1.0; budget], &lambda, &prior)?
        }
        DistillMode::FullTrace => {
            let a = options.scalar_weight;
            let y = data
                .iter()
                .map(|s| Ok((noiseless_total(s)? + a * s.expert.score) / (1.0 + a)))
                .collect::<Result<Vec<_>>>()?;
            weighted_ridge(&rows, &y, &vec![1.0 + a; budget], &lambda, &prior)?
        }
        DistillMode::ScalarOnly => {
            if budget < d {
                warning = Some(format!("scalar-only fit under-determined: budget {budget} < {d} features"));
            }
            let y: Vec<f64> = data.iter().map(|s| s.expert.score).collect();
            let (mut b, mut v) = (prior_b, prior.clone());
            for _ in 0..epochs {
                let w: Vec<f64> = rows
                    .iter()
                    .zip(&y)
                    .map(|(x, &t)| {
                        let r = (t - b - dot(&v, x)).abs();
                        if r <= options.huber_delta { 1.0 } else { options.huber_delta / r }
                    })
                    .collect();
                (b, v) = weighted_ridge(&rows, &y, &w, &lambda, &prior)?;
            }
            (b, v)
        }
    };
    Ok(DistillResult { grader: ProxyGrader::linear(view, b, v, grader.trace_noise), warning })
}

/// Validation samples for ranking: `(task_id, features, expert score)`.
pub type ValidationSample = (u64, FeatureVector, f64);

/// Advantage correlation between a grader's deterministic scores and expert scores.
pub fn validation_rho(grader: &ProxyGrader, validation: &[ValidationSample]) -> Result<f64> {
    let mut scores = PromptGroupedScores::default();
    for (task, f, expert) in validation {
        scores.push(*task, *expert, grader.deterministic_score(*task, f)?);
    }
    Ok(advantage_correlation(&scores)?.rho)
}

/// Ranks `candidates` by validation ρ (ties: lowest index first) and
/// averages the best `k`. Returns the ensemble and each candidate's ρ.
pub fn ensemble_top_k(
    candidates: &[ProxyGrader],
    validation: &[ValidationSample],
    k: usize,
) -> Result<(ProxyGrader, Vec<f64>)> {
    if candidates.is_empty() {
        return Err(invalid("no candidate graders"));
    }
    if k < 1 || k > candidates.len() {
        return Err(invalid(format!("k = {k} must be in 1..={}", candidates.len())));
    }
    let rhos: Vec<f64> = candidates
        .iter()
        .map(|c| validation_rho(c, validation).unwrap_or(f64::NEG_INFINITY))
        .collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| rhos[b].partial_cmp(&rhos[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let members: Vec<ProxyGrader> = order[..k].iter().map(|&i| candidates[i].clone()).collect();
    let grader = if k == 1 {
        members.into_iter().next().expect("k >= 1")
    } else {
        ProxyGrader {
            view: members[0].view.clone(),
            trace_noise: members[0].trace_noise,
            model: GraderModel::Ensemble { members },
            per_task: None,
        }
    };
    Ok((grader, rhos))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub task_id: u64,
    pub split: Split,
    pub rollout: Rollout,
    pub features: FeatureVector,
    pub expert: GradeRecord,
    pub step: u64,
}

impl BufferEntry {
    pub fn sample(&self) -> GradedSample {
        GradedSample { task_id: self.task_id, features: self.features.clone(), expert: self.expert.clone() }
    }
}

/// Append-only store of expert-graded rollouts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    entries: Vec<BufferEntry>,
}

impl ReplayBuffer {
    pub fn push(&mut self, entry: BufferEntry) {
        self.entries.push(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn by_split(&self, split: Split) -> impl Iterator<Item = &BufferEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Entries collected at or after `step`, oldest first.
    pub fn since(&self, step: u64) -> impl Iterator<Item = &BufferEntry> {
        self.entries.iter().filter(move |e| e.step >= step)
    }

    /// The `n` most recent entries of `split`, oldest first.
    pub fn recent(&self, split: Split, n: usize) -> Vec<&BufferEntry> {
        let mut v: Vec<&BufferEntry> = self.by_split(split).collect();
        let start = v.len().saturating_sub(n);
        v.drain(..start);
        v
    }
}
