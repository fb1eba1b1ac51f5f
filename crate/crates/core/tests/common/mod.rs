//! Independent oracles for tests: exact enumeration of a small environment
//! and a from-scratch implementation of the policy's log-likelihood gradient.
#![allow(dead_code)]

use proxyrl::env::{Env, EnvConfig, TaskInstance};
use proxyrl::policy::PolicyParams;
use proxyrl::rng::Rng;
use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;

/// A V = 4, L = 3 environment small enough to enumerate (64 sequences per task).
pub fn enumerable_env(seed: u64) -> Env {
    let config = EnvConfig { seed, context_dim: 3, vocab: 4, length: 3, n_train: 6, n_val: 6, ..EnvConfig::default() };
    Env::new(config).expect("valid enumerable config")
}

pub fn all_sequences(vocab: usize, length: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..length {
        out = out
            .into_iter()
            .flat_map(|prefix: Vec<usize>| {
                (0..vocab).map(move |v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect();
    }
    out
}

pub fn random_policy(env: &Env, scale: f64, seed: u64) -> PolicyParams {
    let c = env.config();
    let mut p = PolicyParams::zeros(c.vocab, c.length, c.context_dim);
    let mut rng = Rng::seed_from_u64(seed);
    for w in p.weights.iter_mut() {
        *w = scale * rng.sample::<f64, _>(StandardNormal);
    }
    p
}

/// Logits `W f` at one step, written out from the parameter layout.
fn logits(policy: &PolicyParams, context: &[f64], prev: Option<usize>) -> (Vec<f64>, Vec<f64>) {
    let (v, dc) = (policy.vocab, policy.context_dim);
    let width = dc + v + 1;
    let mut f = vec![0.0; width];
    f[..dc].copy_from_slice(context);
    if let Some(p) = prev {
        f[dc + p] = 1.0;
    }
    f[width - 1] = 1.0;
    let z = (0..v).map(|a| (0..width).map(|k| policy.weights[a * width + k] * f[k]).sum()).collect();
    (z, f)
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn seq_logprob(policy: &PolicyParams, task: &TaskInstance, tokens: &[usize]) -> f64 {
    let mut prev = None;
    let mut lp = 0.0;
    for &y in tokens {
        let (z, _) = logits(policy, &task.context, prev);
        lp += softmax(&z)[y].ln();
        prev = Some(y);
    }
    lp
}

/// `∇_W log π(y)`: per step, `(onehot(y_t) − p_t) ⊗ f_t`.
pub fn seq_grad_logprob(policy: &PolicyParams, task: &TaskInstance, tokens: &[usize]) -> Vec<f64> {
    let width = policy.context_dim + policy.vocab + 1;
    let mut g = vec![0.0; policy.weights.len()];
    let mut prev = None;
    for &y in tokens {
        let (z, f) = logits(policy, &task.context, prev);
        let p = softmax(&z);
        for a in 0..policy.vocab {
            let coef = if a == y { 1.0 } else { 0.0 } - p[a];
            for k in 0..width {
                g[a * width + k] += coef * f[k];
            }
        }
        prev = Some(y);
    }
    g
}

/// Exact `J_exp(θ)`: prompt-averaged expectation of the noiseless expert reward.
pub fn exact_j(env: &Env, policy: &PolicyParams, tasks: &[TaskInstance]) -> f64 {
    let seqs = all_sequences(policy.vocab, policy.length);
    let mut total = 0.0;
    for t in tasks {
        for y in &seqs {
            let r = env.expert().noiseless(&env.extract_features(t, y).unwrap());
            total += seq_logprob(policy, t, y).exp() * r;
        }
    }
    total / tasks.len() as f64
}

/// Exact `∇J_exp(θ) = E[R ∇log π]`, prompt-averaged.
pub fn exact_grad_j(env: &Env, policy: &PolicyParams, tasks: &[TaskInstance]) -> Vec<f64> {
    let seqs = all_sequences(policy.vocab, policy.length);
    let mut g = vec![0.0; policy.weights.len()];
    for t in tasks {
        for y in &seqs {
            let r = env.expert().noiseless(&env.extract_features(t, y).unwrap());
            let w = seq_logprob(policy, t, y).exp() * r / tasks.len() as f64;
            for (gi, d) in g.iter_mut().zip(seq_grad_logprob(policy, t, y)) {
                *gi += w * d;
            }
        }
    }
    g
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn shifted(policy: &PolicyParams, delta: &[f64]) -> PolicyParams {
    let mut p = policy.clone();
    for (w, d) in p.weights.iter_mut().zip(delta) {
        *w += d;
    }
    p
}
