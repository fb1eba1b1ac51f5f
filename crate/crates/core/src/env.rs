//! Synthetic task distribution, rollout features and the expert reward.
//!
//! A task ("prompt") is a context vector. A rollout is a fixed-length token
//! sequence. Each rollout is summarised by a feature vector `φ` with two kinds
//! of entries:
//!
//! * **quality** features `q_j = 3·tanh(gain · Σ_v a_j(x)[v] · p̂[v])`, where
//!   `p̂` is the token histogram and `a_j(x) = center_v(B_j x / √d_c)` is a
//!   task-dependent token preference drawn once from the environment seed;
//! * **hack** features, each a raw statistic `u` passed through the gated
//!   squash `3·tanh(max(0, u − threshold) / width)`:
//!   repetition rate `1 − distinct/len`, magic-token frequency
//!   `count(token 0)/len`, and adjacent-repeat rate
//!   `#{t : y_t = y_{t−1}} / (len − 1)`.
//!
//! The gate keeps hack features at (almost always) exactly zero on the
//! near-uniform base policy, so a proxy fitted to scalar grades of base
//! samples cannot see them. The expert penalises them.
//!
//! The expert score is `clamp(offset + w·φ + ε, 0, 100)` with
//! `ε ~ N(0, noise_sigma²)`; with feedback it also returns the noiseless
//! per-feature contributions `w_j·φ_j`.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grading::{Feedback, GradeRecord, GradeSource};
use crate::policy::{PolicyParams, Rollout};
use crate::rng::{Rng, Streams};

/// Bound of every feature after squashing.
pub const FEATURE_BOUND: f64 = 3.0;

/// Token whose frequency drives the magic-token hack.
pub const MAGIC_TOKEN: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HackKind {
    Repetition,
    MagicToken,
    AdjacentRepeat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HackSpec {
    pub kind: HackKind,
    /// Expert weight; must be negative.
    pub weight: f64,
    /// Raw statistic value at which the feature starts to activate.
    pub threshold: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Seed for the task dataset and the quality preference matrices.
    pub seed: u64,
    pub context_dim: usize,
    pub vocab: usize,
    pub length: usize,
    pub n_train: usize,
    pub n_val: usize,
    /// Expert weights of the quality features; all must be positive.
    pub quality_weights: Vec<f64>,
    pub quality_gain: f64,
    pub hacks: Vec<HackSpec>,
    pub noise_sigma: f64,
    pub offset: f64,
    /// Coefficient of the first hack feature leaking into the first observed
    /// quality feature of the proxy view.
    pub confound_coef: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            context_dim: 8,
            vocab: 16,
            length: 12,
            n_train: 500,
            n_val: 150,
            quality_weights: vec![5.0, 4.0, 4.0, 3.0, 3.0],
            quality_gain: 1.0,
            hacks: vec![
                HackSpec { kind: HackKind::Repetition, weight: -10.0, threshold: 0.6, width: 0.2 },
                HackSpec { kind: HackKind::MagicToken, weight: -6.0, threshold: 0.45, width: 0.3 },
                HackSpec { kind: HackKind::AdjacentRepeat, weight: -6.0, threshold: 0.5, width: 0.3 },
            ],
            noise_sigma: 4.5,
            offset: 50.0,
            confound_coef: 0.5,
        }
    }
}

impl EnvConfig {
    pub fn n_quality(&self) -> usize {
        self.quality_weights.len()
    }

    pub fn n_features(&self) -> usize {
        self.quality_weights.len() + self.hacks.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.length < 1 || self.context_dim < 1 {
            return Err(invalid("env requires vocab >= 2, length >= 1, context_dim >= 1"));
        }
        if self.n_train < 1 || self.n_val < 1 {
            return Err(invalid("dataset splits must be nonempty"));
        }
        if self.quality_weights.is_empty() {
            return Err(invalid("at least one quality feature is required"));
        }
        if self.quality_weights.iter().any(|w| !(*w > 0.0)) {
            return Err(invalid("quality weights must be positive"));
        }
        if self.hacks.iter().any(|h| !(h.weight < 0.0) || !(h.width > 0.0)) {
            return Err(invalid("hack weights must be negative and widths positive"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(invalid("noise_sigma must be non-negative"));
        }
        if !self.confound_coef.is_finite() || !self.quality_gain.is_finite() {
            return Err(invalid("confound_coef and quality_gain must be finite"));
        }
        Ok(())
    }
}

/// One prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: u64,
    pub context: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<TaskInstance>,
    pub validation: Vec<TaskInstance>,
    pub seed: u64,
}

impl Dataset {
    /// Looks a task up by id in either split.
    pub fn task(&self, id: u64) -> Option<&TaskInstance> {
        let n_train = self.train.len() as u64;
        if id < n_train {
            self.train.get(id as usize)
        } else {
            self.validation.get((id - n_train) as usize)
        }
    }
}

/// Builds train/validation splits with i.i.d. standard-normal contexts.
///
/// Train ids are `0..n_train`, validation ids follow, so the splits are disjoint.
pub fn make_dataset(seed: u64, n_train: usize, n_val: usize, context_dim: usize) -> Result<Dataset> {
    if n_train < 1 || n_val < 1 || context_dim < 1 {
        return Err(invalid("dataset counts and context dimension must be >= 1"));
    }
    let streams = Streams::new(seed);
    let make = |id: u64| {
        let mut rng = streams.rng("dataset", id);
        let context = (0..context_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        TaskInstance { id, context }
    };
    let train = (0..n_train as u64).map(make).collect();
    let validation = (n_train as u64..(n_train + n_val) as u64).map(make).collect();
    Ok(Dataset { train, validation, seed })
}

/// Feature vector of one rollout; the first `n_quality` entries are quality
/// features, the rest hack features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub n_quality: usize,
}

impl FeatureVector {
    pub fn quality(&self) -> &[f64] {
        &self.values[..self.n_quality]
    }

    pub fn hacks(&self) -> &[f64] {
        &self.values[self.n_quality..]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertReward {
    pub weights: Vec<f64>,
    pub noise_sigma: f64,
    pub offset: f64,
}

impl ExpertReward {
    /// `offset + w·φ`, before clamping.
    pub fn raw(&self, features: &FeatureVector) -> f64 {
        self.offset + dot(&self.weights, &features.values)
    }

    /// Noiseless, clamped expert reward.
    pub fn noiseless(&self, features: &FeatureVector) -> f64 {
        clamp_score(self.raw(features))
    }
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Estimate {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let se = if n < 2 {
            0.0
        } else {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        };
        Estimate { mean, se, n }
    }
}

/// The environment: feature extractor plus expert grader.
#[derive(Debug)]
pub struct Env {
    config: EnvConfig,
    /// `preferences[j]` is a `vocab × context_dim` matrix, row-major.
    preferences: Vec<Vec<f64>>,
    expert: ExpertReward,
    expert_calls: AtomicU64,
}

impl Clone for Env {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            preferences: self.preferences.clone(),
            expert: self.expert.clone(),
            expert_calls: AtomicU64::new(self.expert_calls.load(Ordering::Relaxed)),
        }
    }
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Env> {
        config.validate()?;
        let streams = Streams::new(config.seed);
        let (v, dc) = (config.vocab, config.context_dim);
        let preferences = (0..config.n_quality())
            .map(|j| {
                let mut rng = streams.rng("quality-preferences", j as u64);
                (0..v * dc).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
            })
            .collect();
        let mut weights = config.quality_weights.clone();
        weights.extend(config.hacks.iter().map(|h| h.weight));
        let expert = ExpertReward { weights, noise_sigma: config.noise_sigma, offset: config.offset };
        Ok(Env { config, preferences, expert, expert_calls: AtomicU64::new(0) })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn expert(&self) -> &ExpertReward {
        &self.expert
    }

    pub fn n_features(&self) -> usize {
        self.config.n_features()
    }

    pub fn n_quality(&self) -> usize {
        self.config.n_quality()
    }

    pub fn dataset(&self) -> Result<Dataset> {
        make_dataset(self.config.seed, self.config.n_train, self.config.n_val, self.config.context_dim)
    }

    /// Number of `expert_grade` calls served so far (instrumentation).
    pub fn expert_calls(&self) -> u64 {
        self.expert_calls.load(Ordering::Relaxed)
    }

    /// Centered per-token preference `a_j(x)` of quality feature `j`.
    pub fn token_preferences(&self, task: &TaskInstance, j: usize) -> Vec<f64> {
        let (v, dc) = (self.config.vocab, self.config.context_dim);
        let scale = 1.0 / (dc as f64).sqrt();
        let b = &self.preferences[j];
        let mut a: Vec<f64> = (0..v)
            .map(|tok| scale * dot(&b[tok * dc..(tok + 1) * dc], &task.context))
            .collect();
        let mean = a.iter().sum::<f64>() / v as f64;
        a.iter_mut().for_each(|x| *x -= mean);
        a
    }

    pub fn extract_features(&self, task: &TaskInstance, tokens: &[usize]) -> Result<FeatureVector> {
        if tokens.is_empty() {
            return Err(Error::EmptyRollout);
        }
        let v = self.config.vocab;
        let n = tokens.len() as f64;
        let mut counts = vec![0usize; v];
        for &t in tokens {
            if t >= v {
                return Err(Error::TokenOutOfRange { token: t, vocab: v });
            }
            counts[t] += 1;
        }
        let mut values = Vec::with_capacity(self.n_features());
        for j in 0..self.n_quality() {
            let a = self.token_preferences(task, j);
            let u: f64 = a.iter().zip(&counts).map(|(a, &c)| a * c as f64).sum::<f64>() / n;
            values.push(FEATURE_BOUND * (self.config.quality_gain * u).tanh());
        }
        for hack in &self.config.hacks {
            let raw = match hack.kind {
                HackKind::Repetition => 1.0 - counts.iter().filter(|&&c| c > 0).count() as f64 / n,
                HackKind::MagicToken => counts[MAGIC_TOKEN] as f64 / n,
                HackKind::AdjacentRepeat => adjacent_repeat_rate(tokens),
            };
            values.push(hack_squash(raw, hack.threshold, hack.width));
        }
        Ok(FeatureVector { values, n_quality: self.n_quality() })
    }

    /// Grades one rollout. Returns the noisy clamped score and, if requested,
    /// the noiseless per-feature decomposition.
    pub fn expert_grade(
        &self,
        task: &TaskInstance,
        rollout: &Rollout,
        rng: &mut Rng,
        with_feedback: bool,
    ) -> Result<GradeRecord> {
        if rollout.task_id != task.id {
            return Err(invalid(format!("rollout for task {} graded against task {}", rollout.task_id, task.id)));
        }
        let features = self.extract_features(task, &rollout.tokens)?;
        Ok(self.expert_grade_features(&features, rng, with_feedback))
    }

    /// Same as [`Env::expert_grade`] for precomputed features.
    pub fn expert_grade_features(&self, features: &FeatureVector, rng: &mut Rng, with_feedback: bool) -> GradeRecord {
        self.expert_calls.fetch_add(1, Ordering::Relaxed);
        let raw = self.expert.raw(features);
        let noise = if self.expert.noise_sigma > 0.0 {
            self.expert.noise_sigma * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        let feedback = with_feedback.then(|| Feedback {
            contributions: self.expert.weights.iter().zip(&features.values).map(|(w, f)| w * f).collect(),
            offset: self.expert.offset,
            noiseless: raw,
        });
        GradeRecord { score: clamp_score(raw + noise), feedback, source: GradeSource::Expert, trace_count: 1 }
    }

    /// Monte-Carlo estimate of the expected noiseless expert reward.
    ///
    /// Rollouts are spread round-robin over `tasks`; the standard error is
    /// over the `n_mc` rollouts.
    pub fn true_objective(
        &self,
        policy: &PolicyParams,
        tasks: &[TaskInstance],
        n_mc: usize,
        rng: &mut Rng,
    ) -> Result<Estimate> {
        if n_mc < 1 || tasks.is_empty() {
            return Err(invalid("true_objective needs n_mc >= 1 and at least one task"));
        }
        let mut rewards = Vec::with_capacity(n_mc);
        for i in 0..n_mc {
            let task = &tasks[i % tasks.len()];
            let rollout = policy.sample(task, rng);
            let features = self.extract_features(task, &rollout.tokens)?;
            rewards.push(self.expert.noiseless(&features));
        }
        Ok(Estimate::from_samples(&rewards))
    }
}

/// Gated squash used by hack features: zero at or below `threshold`.
pub fn hack_squash(raw: f64, threshold: f64, width: f64) -> f64 {
    FEATURE_BOUND * ((raw - threshold).max(0.0) / width).tanh()
}

fn adjacent_repeat_rate(tokens: &[usize]) -> f64 {
    if tokens.len() < 2 {
        return 0.0;
    }
    let repeats = tokens.windows(2).filter(|w| w[0] == w[1]).count();
    repeats as f64 / (tokens.len() - 1) as f64
}

pub fn clamp_score(x: f64) -> f64 {
    x.clamp(0.0, 100.0)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn env() -> Env {
        Env::new(EnvConfig::default()).unwrap()
    }

    #[test]
    fn dataset_sizes_and_determinism() {
        let a = make_dataset(7, 500, 150, 8).unwrap();
        let b = make_dataset(7, 500, 150, 8).unwrap();
        assert_eq!(a.train.len(), 500);
        assert_eq!(a.validation.len(), 150);
        assert_eq!(a, b);
        let c = make_dataset(8, 500, 150, 8).unwrap();
        assert_ne!(a.train[0].context, c.train[0].context);
        let train_ids: std::collections::HashSet<_> = a.train.iter().map(|t| t.id).collect();
        assert!(a.validation.iter().all(|t| !train_ids.contains(&t.id)));
        assert_eq!(a.task(503).unwrap().id, 503);
    }

    #[test]
    fn empty_rollout_is_an_error() {
        let env = env();
        let ds = env.dataset().unwrap();
        assert!(matches!(env.extract_features(&ds.train[0], &[]), Err(Error::EmptyRollout)));
        assert!(matches!(
            env.extract_features(&ds.train[0], &[16]),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn distinct_tokens_have_no_hack_activation() {
        let env = env();
        let ds = env.dataset().unwrap();
        let f = env.extract_features(&ds.train[0], &(1..13).collect::<Vec<_>>()).unwrap();
        assert!(f.hacks().iter().all(|&h| h == 0.0));
    }

    #[test]
    fn repeated_magic_token_saturates_hacks() {
        let env = env();
        let ds = env.dataset().unwrap();
        let f = env.extract_features(&ds.train[0], &[0; 8]).unwrap();
        let cfg = env.config();
        assert_eq!(f.hacks()[0], hack_squash(1.0 - 1.0 / 8.0, cfg.hacks[0].threshold, cfg.hacks[0].width));
        assert_eq!(f.hacks()[1], hack_squash(1.0, cfg.hacks[1].threshold, cfg.hacks[1].width));
        assert!(f.values.iter().all(|x| x.abs() <= FEATURE_BOUND));
    }

    #[test]
    fn zero_feature_expert_score_is_offset() {
        let mut cfg = EnvConfig::default();
        cfg.noise_sigma = 0.0;
        let env = Env::new(cfg).unwrap();
        let zero = FeatureVector { values: vec![0.0; 8], n_quality: 5 };
        let mut rng = Rng::seed_from_u64(1);
        let g = env.expert_grade_features(&zero, &mut rng, true);
        assert_eq!(g.score, 50.0);
        assert_eq!(g.feedback.unwrap().noiseless, 50.0);
    }
}
