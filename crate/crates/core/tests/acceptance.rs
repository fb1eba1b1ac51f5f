//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line with the
//! measured numbers; the process exits nonzero if any criterion fails.
//!
//! Positional arguments select criteria by number, e.g.
//! `cargo test -p proxyrl --test acceptance -- 4 7`.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::*;
use proxyrl::estimators::{adv_inner_product, grad_projection};
use proxyrl::grading::{
    baseline_grader, update_distill, validation_rho, DistillMode, GradedSample, ValidationSample,
};
use proxyrl::metrics::{advantage_correlation, bootstrap_ci, pgr, PromptGroupedScores};
use proxyrl::protocol::{run_protocol, FtSchedule, IclUpdate, Mode, RunOutcome, RunResult};
use proxyrl::runlog::Event;
use proxyrl::trainer::{surrogate_gradient, train, GroupBatch, HookAction, ProxyReward, StepStats};
use proxyrl::{
    Env, ExperimentConfig, FeatureVector, PolicyParams, ProxyGrader, Rng, Rollout, Streams, TaskInstance, Trainer,
    TrainerConfig,
};
use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn config(seed: u64, mode: Mode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.protocol.mode = mode;
    cfg
}

fn run(cfg: &ExperimentConfig) -> RunResult {
    let env = Env::new(cfg.env.clone()).expect("valid env");
    let RunOutcome { result, error } = run_protocol(cfg, &env, None).expect("protocol runs");
    assert!(error.is_none(), "run failed: {error:?}");
    result
}

/// The small distillation schedule (unscaled 80 initial, 40 per update).
fn small_ft(seed: u64, mode: DistillMode) -> ExperimentConfig {
    let mut cfg = config(seed, Mode::FtLoop);
    cfg.protocol.ft = FtSchedule { init_samples: 80, samples_per_iter: 40, ..FtSchedule::default() };
    cfg.protocol.distill_mode = mode;
    cfg
}

/// Runs shared between criteria, computed on first use.
#[derive(Default)]
struct Cache {
    expert_max: Option<f64>,
    expert_budget: Option<u64>,
    goodhart: Option<Vec<RunResult>>,
    ft_full: Option<Vec<RunResult>>,
    ft_scalar: Option<Vec<RunResult>>,
}

impl Cache {
    /// Final objective of the 2000-step expert baseline on seed 0.
    fn expert(&mut self) -> (f64, u64) {
        if self.expert_max.is_none() {
            let mut cfg = config(0, Mode::ExpertBaseline);
            cfg.protocol.total_steps = 2000;
            cfg.protocol.checkpoint_interval = 200;
            let r = run(&cfg);
            self.expert_max = Some(r.final_j());
            self.expert_budget = Some(r.ledger.protocol_total());
        }
        (self.expert_max.unwrap(), self.expert_budget.unwrap())
    }

    /// Proxy baseline past the stopping rule, with estimator tracking.
    fn goodhart(&mut self) -> &[RunResult] {
        self.goodhart.get_or_insert_with(|| {
            SEEDS
                .iter()
                .map(|&s| {
                    let mut cfg = config(s, Mode::ProxyBaseline);
                    cfg.protocol.run_past_stop = true;
                    cfg.protocol.total_steps = 600;
                    cfg.protocol.track_estimates = true;
                    run(&cfg)
                })
                .collect()
        })
    }

    fn ft(&mut self, mode: DistillMode) -> &[RunResult] {
        let slot = match mode {
            DistillMode::ScalarOnly => &mut self.ft_scalar,
            _ => &mut self.ft_full,
        };
        slot.get_or_insert_with(|| SEEDS.iter().map(|&s| run(&small_ft(s, mode))).collect())
    }
}

fn row_at(r: &RunResult, step: u64) -> Option<f64> {
    r.log.rows.iter().find(|row| row.step == step).map(|row| row.expert_reward)
}

fn peak(r: &RunResult) -> (u64, f64) {
    let p = r.peak().expect("run has rows");
    (p.step, p.expert_reward)
}

fn collect_batch(env: &Env, trainer: &Trainer, tasks: &[TaskInstance], reward: &ProxyGrader, rng: &mut Rng) -> GroupBatch {
    let refs: Vec<&TaskInstance> = tasks.iter().collect();
    let mut reward = ProxyReward { grader: reward, n_traces: 6 };
    trainer.collect(env, &refs, &mut reward, rng).expect("collect")
}

fn base_grader(env: &Env, tasks: &[TaskInstance], rng: &mut Rng) -> ProxyGrader {
    let c = env.config();
    let base = PolicyParams::zeros(c.vocab, c.length, c.context_dim);
    baseline_grader(env, &base, tasks, 400, 6.0, rng).expect("baseline fit").0
}

fn c1_gradients(_: &mut Cache) -> Verdict {
    let mut worst_surrogate: f64 = 0.0;
    let mut worst_fd: f64 = 0.0;
    for trial in 0..5u64 {
        let env = enumerable_env(trial);
        let tasks = env.dataset().unwrap().train;
        let mut rng = Rng::seed_from_u64(trial);
        let grader = base_grader(&env, &tasks, &mut rng);
        let policy = random_policy(&env, 0.7, 10 + trial);
        let cfg = TrainerConfig::default();
        let trainer = Trainer::new(cfg.clone(), policy.clone()).unwrap();
        let batch = collect_batch(&env, &trainer, &tasks, &grader, &mut rng);

        // At the sampling policy every ratio is 1: the surrogate gradient is
        // −(1/T) Σ A ∇log π.
        let (_, grad) = surrogate_gradient(&policy, &batch, &cfg, None).unwrap();
        let mut oracle = vec![0.0; grad.len()];
        for g in &batch.groups {
            for (ro, &a) in g.rollouts.iter().zip(&g.advantages) {
                for (o, d) in oracle.iter_mut().zip(seq_grad_logprob(&policy, &g.task, &ro.tokens)) {
                    *o -= a * d / batch.total_tokens as f64;
                }
            }
        }
        let diff = grad.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_surrogate = worst_surrogate.max(diff);

        let h = 1e-5;
        for _ in 0..20 {
            let task = &tasks[rng.random_range(0..tasks.len())];
            let tokens: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
            let u: Vec<f64> = (0..policy.n_params()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let up: Vec<f64> = u.iter().map(|x| h * x).collect();
            let down: Vec<f64> = u.iter().map(|x| -h * x).collect();
            let fd = (shifted(&policy, &up).logprob(task, &tokens).unwrap()
                - shifted(&policy, &down).logprob(task, &tokens).unwrap())
                / (2.0 * h);
            let analytic = dot(&policy.grad_logprob(task, &tokens).unwrap(), &u);
            worst_fd = worst_fd.max((fd - analytic).abs() / analytic.abs().max(1e-12));
        }
    }
    verdict(
        worst_surrogate < 1e-8 && worst_fd < 1e-5,
        format!("max |surrogate − REINFORCE| {worst_surrogate:.2e}; max FD relative error {worst_fd:.2e} (100 directions)"),
    )
}

fn c2_estimators(_: &mut Cache) -> Verdict {
    // grad_projection with a large batch against exact enumeration.
    let mut worst_rel: f64 = 0.0;
    for trial in 0..5u64 {
        let env = enumerable_env(trial);
        let tasks = env.dataset().unwrap().train;
        let mut rng = Rng::seed_from_u64(100 + trial);
        let grader = base_grader(&env, &tasks, &mut rng);
        let policy = random_policy(&env, 0.5, 200 + trial);
        let mut cfg = TrainerConfig::default();
        cfg.group_size = 8;
        let step = {
            let t = Trainer::new(cfg.clone(), policy.clone()).unwrap();
            let b = collect_batch(&env, &t, &tasks, &grader, &mut rng);
            let (_, g) = surrogate_gradient(&policy, &b, &cfg, None).unwrap();
            g
        };
        cfg.group_size = 40_000;
        let big = collect_batch(&env, &Trainer::new(cfg, policy.clone()).unwrap(), &tasks, &grader, &mut rng);
        let expert: Vec<Vec<f64>> =
            big.groups.iter().map(|g| g.features.iter().map(|f| env.expert().noiseless(f)).collect()).collect();
        let j0 = exact_j(&env, &policy, &tasks);
        for size in [1e-3, 1e-4] {
            let delta: Vec<f64> = step.iter().map(|x| -size * x / norm(&step)).collect();
            let actual = exact_j(&env, &shifted(&policy, &delta), &tasks) - j0;
            let predicted = grad_projection(&policy, &big, &expert, &delta).unwrap();
            worst_rel = worst_rel.max((predicted - actual).abs() / actual.abs());
        }
    }

    // Advantage inner product along a proxy-trained trajectory: 100 steps
    // at the default learning rate, each probed with a small plain-gradient
    // step of size η and compared with the exact change.
    let eta = 1e-3;
    let env = enumerable_env(0);
    let tasks = env.dataset().unwrap().train;
    let mut rng = Rng::seed_from_u64(7);
    let grader = base_grader(&env, &tasks, &mut rng);
    let c = env.config();
    let cfg = TrainerConfig::default();
    let mut trainer = Trainer::new(cfg.clone(), PolicyParams::zeros(c.vocab, c.length, c.context_dim)).unwrap();
    let (mut agree, mut increases) = (0, 0);
    for _ in 0..100 {
        let batch = collect_batch(&env, &trainer, &tasks, &grader, &mut rng);
        let policy = trainer.policy.clone();
        let (_, g) = surrogate_gradient(&policy, &batch, &cfg, None).unwrap();
        let delta: Vec<f64> = g.iter().map(|x| -eta * x).collect();
        let actual = exact_j(&env, &shifted(&policy, &delta), &tasks) - exact_j(&env, &policy, &tasks);
        let aip = adv_inner_product(&expert_vs_advantage(&env, &batch), eta, true);
        agree += usize::from((aip > 0.0) == (actual > 0.0));
        increases += usize::from(actual > 0.0);
        trainer.apply(&batch).unwrap();
    }

    // Reported only: proxies drawn at random around ±expert weights, where
    // the first-order kernel mismatch dominates.
    let mut adversarial = 0;
    for trial in 0..100u64 {
        let env = enumerable_env(trial % 5);
        let tasks = env.dataset().unwrap().train;
        let mut rng = Rng::seed_from_u64(1000 + trial);
        let a: f64 = rng.random_range(-1.0..1.0);
        let w: Vec<f64> =
            env.expert().weights.iter().map(|w| a * w + 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let policy = random_policy(&env, 0.5, 2000 + trial);
        let trainer = Trainer::new(cfg.clone(), policy.clone()).unwrap();
        let refs: Vec<&TaskInstance> = tasks.iter().collect();
        let mut reward =
            |_: &TaskInstance, _: &Rollout, f: &FeatureVector, _: &mut Rng| -> proxyrl::Result<f64> { Ok(dot(&w, &f.values)) };
        let batch = trainer.collect(&env, &refs, &mut reward, &mut rng).unwrap();
        let (_, g) = surrogate_gradient(&policy, &batch, &cfg, None).unwrap();
        let delta: Vec<f64> = g.iter().map(|x| -eta * x).collect();
        let actual = exact_j(&env, &shifted(&policy, &delta), &tasks) - exact_j(&env, &policy, &tasks);
        let aip = adv_inner_product(&expert_vs_advantage(&env, &batch), eta, true);
        adversarial += usize::from((aip > 0.0) == (actual > 0.0));
    }

    verdict(
        worst_rel < 0.1 && agree >= 90,
        format!(
            "grad_projection worst relative error {:.2}% (‖Δθ‖ ∈ {{1e-3, 1e-4}}, 5 policies); \
             adv_inner_product sign agreement {agree}/100 along a proxy run ({increases} steps increased J); \
             random-proxy agreement {adversarial}/100 (reported only)",
            100.0 * worst_rel
        ),
    )
}

fn expert_vs_advantage(env: &Env, batch: &GroupBatch) -> PromptGroupedScores {
    let mut s = PromptGroupedScores::default();
    for g in &batch.groups {
        for (f, &a) in g.features.iter().zip(&g.advantages) {
            s.push(g.task.id, env.expert().noiseless(f), a);
        }
    }
    s
}

fn c3_overestimation(cache: &mut Cache) -> Verdict {
    let mut hits = 0;
    let mut parts = Vec::new();
    for (seed, r) in SEEDS.iter().zip(cache.goodhart()) {
        let (p, _) = peak(r);
        let check = r
            .estimates
            .iter()
            .filter(|e| e.step > p && e.actual_delta.is_some())
            .find(|e| e.step >= 2 * p)
            .or_else(|| r.estimates.iter().rev().find(|e| e.actual_delta.is_some()));
        let Some(e) = check else {
            parts.push(format!("seed {seed}: no measurement"));
            continue;
        };
        let predicted: f64 = r.estimates.iter().filter(|x| x.step <= e.step).map(|x| x.grad_projection).sum();
        let actual = e.actual_delta.unwrap();
        hits += usize::from(predicted >= actual);
        parts.push(format!("seed {seed} @{}: {predicted:.1} vs {actual:.1}", e.step));
    }
    verdict(hits >= 4, format!("prediction ≥ actual on {hits}/5 ({})", parts.join("; ")))
}

fn c4_goodhart(cache: &mut Cache) -> Verdict {
    let mut hits = 0;
    let mut parts = Vec::new();
    for (seed, r) in SEEDS.iter().zip(cache.goodhart()) {
        let init = r.log.rows[0].expert_reward;
        let (p, jp) = peak(r);
        let later = row_at(r, 2 * p);
        let ok = jp >= init + 5.0 && later.is_some_and(|j| j <= jp - 5.0);
        hits += usize::from(ok);
        parts.push(format!(
            "seed {seed}: {init:.1} → {jp:.1}@{p} → {}@{}",
            later.map_or("n/a".into(), |j| format!("{j:.1}")),
            2 * p
        ));
    }
    verdict(hits >= 4, format!("{hits}/5 rise-then-fall ({})", parts.join("; ")))
}

fn synthetic_scores(rho: f64, prompts: usize, per_prompt: usize, rng: &mut Rng) -> PromptGroupedScores {
    let mut s = PromptGroupedScores::default();
    for p in 0..prompts {
        let offset = 10.0 * rng.sample::<f64, _>(StandardNormal);
        for _ in 0..per_prompt {
            let e: f64 = rng.sample(StandardNormal);
            let z: f64 = rng.sample(StandardNormal);
            s.push(p as u64, 50.0 + offset + 5.0 * e, 3.0 * (rho * e + (1.0 - rho * rho).sqrt() * z));
        }
    }
    s
}

fn c5_rho(_: &mut Cache) -> Verdict {
    let streams = Streams::new(55);
    let base = synthetic_scores(0.3, 50, 16, &mut streams.rng("affine", 0));
    let expert_as_proxy = base.groups.iter().fold(PromptGroupedScores::default(), |mut s, (&k, v)| {
        for &(e, _) in v {
            s.push(k, e, e);
        }
        s
    });
    let affine = expert_as_proxy.map_proxy(|k, p| (1.0 + k as f64 * 0.37) * p - 20.0 + 3.0 * k as f64);
    let r_affine = advantage_correlation(&affine).unwrap().rho;

    let mut recovered = 0.0;
    for i in 0..200 {
        recovered += advantage_correlation(&synthetic_scores(0.6, 50, 16, &mut streams.rng("recover", i))).unwrap().rho;
    }
    recovered /= 200.0;

    let reps = 500;
    let mut covered = 0;
    for r in 0..reps {
        let s = synthetic_scores(0.6, 50, 16, &mut streams.rng("coverage", r));
        let (lo, hi) =
            bootstrap_ci(&s, |x| advantage_correlation(x).map(|v| v.rho), 200, 0.9, &mut streams.rng("boot", r)).unwrap();
        covered += usize::from(lo <= 0.6 && 0.6 <= hi);
    }
    let coverage = covered as f64 / reps as f64;
    verdict(
        (r_affine - 1.0).abs() < 1e-12 && (recovered - 0.6).abs() <= 0.05 && (0.85..=0.95).contains(&coverage),
        format!("affine ρ {r_affine:.15}; recovered {recovered:.3} (true 0.6); 90% CI coverage {coverage:.3} over {reps}"),
    )
}

fn c6_group_normalization(_: &mut Cache) -> Verdict {
    let cfg = ExperimentConfig::default();
    let env = Env::new(cfg.env.clone()).unwrap();
    let tasks = env.dataset().unwrap().train;
    let mut rng = Rng::seed_from_u64(6);
    let grader = base_grader(&env, &tasks, &mut rng);
    let c = env.config();
    let mut trainer = Trainer::new(cfg.trainer.clone(), PolicyParams::zeros(c.vocab, c.length, c.context_dim)).unwrap();
    let (mut worst_mean, mut worst_std): (f64, f64) = (0.0, 0.0);
    let (mut groups, mut constant) = (0usize, 0usize);
    let mut hook = |_: &Trainer, _: &StepStats, b: &GroupBatch| -> proxyrl::Result<HookAction> {
        for g in &b.groups {
            groups += 1;
            let n = g.advantages.len() as f64;
            let mean = g.advantages.iter().sum::<f64>() / n;
            worst_mean = worst_mean.max(mean.abs());
            if g.advantages.iter().all(|&a| a == 0.0) {
                constant += 1;
            } else {
                let std = (g.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
                worst_std = worst_std.max((std - 1.0).abs());
            }
        }
        Ok(HookAction::Continue)
    };
    let mut reward = ProxyReward { grader: &grader, n_traces: 6 };
    let run = train(&mut trainer, &env, &tasks, &mut reward, 200, &Streams::new(6), &mut hook);
    verdict(
        run.error.is_none() && run.stats.len() == 200 && worst_mean < 1e-9 && worst_std < 1e-6,
        format!(
            "{} steps, {groups} groups ({constant} all-zero): max |mean| {worst_mean:.1e}, max |std − 1| {worst_std:.1e}",
            run.stats.len()
        ),
    )
}

/// Mean ρ logged at grader updates after the first policy update.
fn post_shift_rho(r: &RunResult) -> f64 {
    let v: Vec<f64> =
        r.log.rows.iter().filter(|x| x.step > 0 && x.event == Event::GraderUpdate).filter_map(|x| x.rho).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn c7_full_vs_scalar(cache: &mut Cache) -> Verdict {
    let (max, _) = cache.expert();
    let full: Vec<(u64, f64, f64, f64, f64)> = cache
        .ft(DistillMode::FullTrace)
        .iter()
        .map(|r| (peak(r).0, post_shift_rho(r), r.baseline_j, r.achieved_j, r.final_j()))
        .collect();
    let scalar: Vec<(u64, f64, f64, f64, f64)> = cache
        .ft(DistillMode::ScalarOnly)
        .iter()
        .map(|r| (peak(r).0, post_shift_rho(r), r.baseline_j, r.achieved_j, r.final_j()))
        .collect();
    let earlier = full.iter().zip(&scalar).filter(|(f, s)| s.0 < f.0).count();
    let rho_gap = full.iter().map(|f| f.1).sum::<f64>() / 5.0 - scalar.iter().map(|s| s.1).sum::<f64>() / 5.0;
    let pgr_full = pgr(full[0].2, full[0].3, max).unwrap();
    let pgr_scalar = pgr(scalar[0].2, scalar[0].3, max).unwrap();
    let heavy = run(&config(0, Mode::FtLoop));
    let pgr_heavy = pgr(heavy.baseline_j, heavy.achieved_j, max).unwrap();
    let peaks = |v: &[(u64, f64, f64, f64, f64)]| v.iter().map(|x| x.0.to_string()).collect::<Vec<_>>().join(",");
    verdict(
        earlier >= 4 && rho_gap >= 0.1 && pgr_full >= 0.8 && pgr_heavy >= 0.8 && pgr_scalar <= 0.6,
        format!(
            "scalar peaks earlier {earlier}/5 (full [{}], scalar [{}]); post-shift ρ gap {rho_gap:.2}; \
             seed-0 PGR full {pgr_full:.2}, scalar {pgr_scalar:.2} (small schedule), full {pgr_heavy:.2} (heavy schedule)",
            peaks(&full),
            peaks(&scalar)
        ),
    )
}

fn c8_icl_value(cache: &mut Cache) -> Verdict {
    let (max, expert_budget) = cache.expert();
    let icl = run(&config(0, Mode::IclLoop));
    let proxy = run(&config(0, Mode::ProxyBaseline));
    let pgr_icl = pgr(icl.baseline_j, icl.achieved_j, max).unwrap();
    let pgr_proxy = pgr(proxy.baseline_j, proxy.achieved_j, max).unwrap();
    let budget = icl.ledger.protocol_total();
    let ratio = budget as f64 / expert_budget as f64;
    verdict(
        pgr_icl >= pgr_proxy + 0.1 && ratio <= 0.2,
        format!(
            "PGR icl {pgr_icl:.2} vs proxy {pgr_proxy:.2}; expert grades {budget} vs {expert_budget} ({:.1}%)",
            100.0 * ratio
        ),
    )
}

fn c9_fewshot(_: &mut Cache) -> Verdict {
    let mut hits = 0;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let rubric = run(&config(seed, Mode::IclLoop));
        let mut cfg = config(seed, Mode::IclLoop);
        cfg.protocol.icl_update = IclUpdate::Fewshot;
        let fewshot = run(&cfg);
        let (pr, pf) = (peak(&rubric).0, peak(&fewshot).0);
        hits += usize::from(pf < pr);
        parts.push(format!("{pf} vs {pr}"));
    }
    verdict(hits >= 4, format!("few-shot peaks earlier {hits}/5 (few-shot vs rubric step: {})", parts.join(", ")))
}

fn c10_retrain(cache: &mut Cache) -> Verdict {
    let mut hits = 0;
    let mut parts = Vec::new();
    let ft: Vec<_> = cache.ft(DistillMode::FullTrace).iter().map(|r| r.snapshots.clone()).collect();
    for (seed, snaps) in SEEDS.iter().zip(&ft) {
        let cfg = small_ft(*seed, DistillMode::FullTrace);
        let env = Env::new(cfg.env.clone()).unwrap();
        let mut achieved = [0.0; 2];
        for (slot, iteration) in [1usize, 2].into_iter().enumerate() {
            let mut c = cfg.clone();
            c.protocol.mode = Mode::RetrainScratch;
            c.protocol.retrain_iteration = iteration;
            let out = run_protocol(&c, &env, Some(snaps)).expect("retrain");
            assert!(out.error.is_none());
            achieved[slot] = out.result.achieved_j;
        }
        // Same seed, baseline and maximum for both, so PGR order is achieved order.
        hits += usize::from(achieved[1] >= achieved[0]);
        parts.push(format!("{:.1} vs {:.1}", achieved[1], achieved[0]));
    }
    verdict(hits >= 4, format!("iteration 2 ≥ iteration 1 on {hits}/5 (achieved J: {})", parts.join(", ")))
}

fn c11_ledger(_: &mut Cache) -> Verdict {
    let mut mismatches = Vec::new();
    for cfg in [config(0, Mode::ProxyBaseline), config(0, Mode::IclLoop), small_ft(0, DistillMode::FullTrace)] {
        let env = Env::new(cfg.env.clone()).unwrap();
        let out = run_protocol(&cfg, &env, None).unwrap();
        if env.expert_calls() != out.result.ledger.total() {
            mismatches.push(format!("{:?}: {} calls vs ledger {}", cfg.protocol.mode, env.expert_calls(), out.result.ledger.total()));
        }
    }
    let csv = |cfg: &ExperimentConfig| {
        let mut buf = Vec::new();
        run(cfg).log.write_csv(&mut buf).unwrap();
        buf
    };
    let cfg = config(3, Mode::IclLoop);
    let (a, b) = (csv(&cfg), csv(&cfg));
    verdict(
        mismatches.is_empty() && a == b,
        format!(
            "ledger matches expert calls in 3 modes{}; repeated run log {} ({} bytes)",
            if mismatches.is_empty() { String::new() } else { format!(" except {}", mismatches.join("; ")) },
            if a == b { "byte-identical" } else { "differs" },
            a.len()
        ),
    )
}

fn c12_dip(cache: &mut Cache) -> Verdict {
    let cfg = ExperimentConfig::default();
    let r = &cache.goodhart()[0];
    let (p, _) = peak(r);
    let idx = r.log.rows.iter().position(|row| row.step == p).unwrap();
    let policy = r.checkpoints[idx].clone();
    let base = r.snapshots[0].grader.clone();
    let env = Env::new(cfg.env.clone()).unwrap();
    let data = env.dataset().unwrap();
    let mut rng = Streams::new(12).rng("dip", 0);

    let mut val: Vec<ValidationSample> = Vec::new();
    for prompt in 0..100 {
        let t = &data.validation[prompt % data.validation.len()];
        for _ in 0..16 {
            let f = env.extract_features(t, &policy.sample(t, &mut rng).tokens).unwrap();
            let e = env.expert().noiseless(&f);
            val.push((prompt as u64, f, e));
        }
    }
    let baseline = validation_rho(&base, &val).unwrap();

    let reps = 20;
    let budgets = [2usize, 4, 8, 16, 32, 64, 128, 256, 512];
    let max_budget = *budgets.last().unwrap();
    let pool: Vec<GradedSample> = (0..reps * max_budget)
        .map(|_| {
            let t = &data.train[rng.random_range(0..data.train.len())];
            let f = env.extract_features(t, &policy.sample(t, &mut rng).tokens).unwrap();
            let expert = env.expert_grade_features(&f, &mut rng, true);
            GradedSample { task_id: t.id, features: f, expert }
        })
        .collect();
    let mut curve = Vec::new();
    for &n in &budgets {
        let mut total = 0.0;
        for rep in 0..reps {
            let slice = &pool[rep * max_budget..rep * max_budget + n];
            let g = update_distill(&base, slice, DistillMode::ScalarOnly, n, 3, &cfg.grading.distill).unwrap().grader;
            total += validation_rho(&g, &val).unwrap();
        }
        curve.push((n, total / reps as f64));
    }
    let at = |n: usize| curve.iter().find(|c| c.0 == n).unwrap().1;
    let large_ok = curve.iter().filter(|c| c.0 >= 256).all(|c| c.1 > baseline);
    let shown: Vec<String> = curve.iter().map(|(n, r)| format!("{n}:{r:.3}")).collect();
    verdict(
        at(8) < baseline && large_ok,
        format!(
            "peak checkpoint step {p}; unfitted ρ {baseline:.3}; scalar_only ρ by samples [{}]",
            shown.join(" ")
        ),
    )
}

type Criterion = (u32, &'static str, fn(&mut Cache) -> Verdict);

const CRITERIA: [Criterion; 12] = [
    (1, "oracle gradient equivalence", c1_gradients),
    (2, "estimator fidelity", c2_estimators),
    (3, "estimator overestimation", c3_overestimation),
    (4, "goodhart curve", c4_goodhart),
    (5, "rho correctness", c5_rho),
    (6, "group normalization", c6_group_normalization),
    (7, "full-trace vs scalar-only", c7_full_vs_scalar),
    (8, "icl loop value", c8_icl_value),
    (9, "few-shot brittleness", c9_fewshot),
    (10, "retraining from scratch", c10_retrain),
    (11, "ledger and determinism", c11_ledger),
    (12, "distillation dip", c12_dip),
];

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut cache = Cache::default();
    let mut failed = 0;
    let start = Instant::now();
    for (n, name, f) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let v = f(&mut cache);
        failed += usize::from(!v.pass);
        println!(
            "{} [{n}] {name}: {} ({:.1}s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {failed} failed, {:.1}s total", start.elapsed().as_secs_f64());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
