//! Alignment statistics between expert and proxy scores.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;

/// `(expert, proxy)` score pairs grouped by prompt.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptGroupedScores {
    pub groups: BTreeMap<u64, Vec<(f64, f64)>>,
}

impl PromptGroupedScores {
    pub fn push(&mut self, task_id: u64, expert: f64, proxy: f64) {
        self.groups.entry(task_id).or_default().push((expert, proxy));
    }

    pub fn n_prompts(&self) -> usize {
        self.groups.len()
    }

    pub fn n_pairs(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }

    /// Same groups with the proxy side replaced by `f(task, proxy)`.
    pub fn map_proxy(&self, mut f: impl FnMut(u64, f64) -> f64) -> PromptGroupedScores {
        let groups = self
            .groups
            .iter()
            .map(|(&k, v)| (k, v.iter().map(|&(e, p)| (e, f(k, p))).collect()))
            .collect();
        PromptGroupedScores { groups }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rho {
    pub rho: f64,
    pub n_used: usize,
    pub n_skipped: usize,
}

fn centered(xs: impl Iterator<Item = f64> + Clone) -> (Vec<f64>, f64) {
    let v: Vec<f64> = xs.collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
    (c, mean)
}

fn is_degenerate(ssq: f64, mean: f64, n: usize) -> bool {
    ssq <= 1e-24 * (1.0 + mean * mean) * n as f64
}

/// Pearson correlation of one group, or `None` if either side is constant.
fn group_pearson(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.len() < 2 {
        return None;
    }
    let (e, me) = centered(pairs.iter().map(|p| p.0));
    let (p, mp) = centered(pairs.iter().map(|p| p.1));
    let see: f64 = e.iter().map(|x| x * x).sum();
    let spp: f64 = p.iter().map(|x| x * x).sum();
    if is_degenerate(see, me, pairs.len()) || is_degenerate(spp, mp, pairs.len()) {
        return None;
    }
    let sep: f64 = e.iter().zip(&p).map(|(a, b)| a * b).sum();
    Some((sep / (see.sqrt() * spp.sqrt())).clamp(-1.0, 1.0))
}

/// Prompt-averaged Pearson correlation of the within-prompt advantages.
///
/// Groups with fewer than two pairs or zero variance on either side are
/// skipped and counted; prompts are weighted uniformly.
pub fn advantage_correlation(scores: &PromptGroupedScores) -> Result<Rho> {
    let mut sum = 0.0;
    let (mut used, mut skipped) = (0, 0);
    for pairs in scores.groups.values() {
        match group_pearson(pairs) {
            Some(r) => {
                sum += r;
                used += 1;
            }
            None => skipped += 1,
        }
    }
    if used == 0 {
        return Err(Error::NoInformativePrompts);
    }
    Ok(Rho { rho: sum / used as f64, n_used: used, n_skipped: skipped })
}

/// Pearson correlation over all pairs pooled, ignoring prompts.
pub fn raw_pearson(scores: &PromptGroupedScores) -> Result<f64> {
    let pairs: Vec<(f64, f64)> = scores.groups.values().flatten().cloned().collect();
    if pairs.len() < 2 {
        return Err(invalid("raw_pearson needs at least two pairs"));
    }
    group_pearson(&pairs).ok_or(Error::ZeroVariance)
}

/// Hierarchical percentile bootstrap: prompts are resampled with
/// replacement, then rollouts within each drawn prompt. Replicates on which
/// `statistic` fails are dropped.
pub fn bootstrap_ci<F>(
    scores: &PromptGroupedScores,
    statistic: F,
    n_boot: usize,
    level: f64,
    rng: &mut Rng,
) -> Result<(f64, f64)>
where
    F: Fn(&PromptGroupedScores) -> Result<f64>,
{
    if n_boot < 100 {
        return Err(invalid("n_boot must be >= 100"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(invalid("level must be in (0, 1)"));
    }
    let groups: Vec<&Vec<(f64, f64)>> = scores.groups.values().collect();
    if groups.is_empty() {
        return Err(Error::NoInformativePrompts);
    }
    let mut stats = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        let mut resampled = PromptGroupedScores::default();
        for slot in 0..groups.len() {
            let g = groups[rng.random_range(0..groups.len())];
            let draw = (0..g.len()).map(|_| g[rng.random_range(0..g.len())]).collect();
            resampled.groups.insert(slot as u64, draw);
        }
        if let Ok(s) = statistic(&resampled) {
            stats.push(s);
        }
    }
    if stats.is_empty() {
        return Err(Error::NoInformativePrompts);
    }
    stats.sort_by(|a, b| a.total_cmp(b));
    let alpha = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&stats, alpha), quantile_sorted(&stats, 1.0 - alpha)))
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub rho: f64,
    pub rho_ci: (f64, f64),
    pub raw_pearson: f64,
    pub n_prompts: usize,
    pub n_rollouts: usize,
    pub n_skipped: usize,
}

/// ρ with a hierarchical-bootstrap interval, plus the pooled Pearson.
pub fn alignment_report(scores: &PromptGroupedScores, n_boot: usize, level: f64, rng: &mut Rng) -> Result<AlignmentReport> {
    let rho = advantage_correlation(scores)?;
    let (lo, hi) = bootstrap_ci(scores, |s| advantage_correlation(s).map(|r| r.rho), n_boot, level, rng)?;
    Ok(AlignmentReport {
        rho: rho.rho,
        rho_ci: (lo.min(rho.rho), hi.max(rho.rho)),
        raw_pearson: raw_pearson(scores).unwrap_or(f64::NAN),
        n_prompts: scores.n_prompts(),
        n_rollouts: scores.n_pairs(),
        n_skipped: rho.n_skipped,
    })
}

/// Performance gap recovered.
pub fn pgr(baseline: f64, achieved: f64, maximum: f64) -> Result<f64> {
    if maximum == baseline {
        return Err(Error::ZeroGap);
    }
    Ok((achieved - baseline) / (maximum - baseline))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverOptDecision {
    Continue,
    Realign,
}

/// Realign iff the expert estimate dropped by strictly more than `noise_std`.
pub fn over_optimization_check(prev_mean: f64, curr_mean: f64, noise_std: f64) -> Result<OverOptDecision> {
    if !(noise_std > 0.0) {
        return Err(invalid("noise_std must be positive"));
    }
    Ok(if curr_mean < prev_mean - noise_std { OverOptDecision::Realign } else { OverOptDecision::Continue })
}
