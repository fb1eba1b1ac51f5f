//! Autoregressive softmax policy over a small vocabulary.
//!
//! Logits at step `t` are `W · f_t` with step features
//! `f_t = [context ; onehot(y_{t-1}) ; 1]` (the one-hot block is zero at
//! `t = 0`). Generation always runs exactly `length` steps.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::TaskInstance;
use crate::error::{Error, Result};
use crate::rng::Rng;

const CHECKPOINT_MAGIC: &[u8; 4] = b"PRLP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub vocab: usize,
    pub length: usize,
    pub context_dim: usize,
    /// Row-major `vocab × (context_dim + vocab + 1)`.
    pub weights: Vec<f64>,
    /// Optimizer steps applied so far; stored in checkpoints.
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub task_id: u64,
    pub tokens: Vec<usize>,
    pub logprobs: Vec<f64>,
    pub total_logprob: f64,
}

impl PolicyParams {
    /// Uniform policy (all weights zero).
    pub fn zeros(vocab: usize, length: usize, context_dim: usize) -> PolicyParams {
        assert!(vocab >= 2 && length >= 1, "policy needs vocab >= 2 and length >= 1");
        let weights = vec![0.0; vocab * (context_dim + vocab + 1)];
        PolicyParams { vocab, length, context_dim, weights, step: 0 }
    }

    /// Width of one weight row.
    pub fn n_inputs(&self) -> usize {
        self.context_dim + self.vocab + 1
    }

    pub fn n_params(&self) -> usize {
        self.weights.len()
    }

    /// Dense step-feature vector `[context ; onehot(prev) ; 1]`.
    pub fn step_features(&self, context: &[f64], prev: Option<usize>) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.n_inputs());
        f.extend_from_slice(context);
        f.extend((0..self.vocab).map(|v| if Some(v) == prev { 1.0 } else { 0.0 }));
        f.push(1.0);
        f
    }

    /// Context and bias part of the logits; constant across steps of one rollout.
    fn base_logits(&self, context: &[f64]) -> Vec<f64> {
        let w = self.n_inputs();
        let dc = self.context_dim;
        (0..self.vocab)
            .map(|v| {
                let row = &self.weights[v * w..(v + 1) * w];
                row[..dc].iter().zip(context).map(|(a, b)| a * b).sum::<f64>() + row[w - 1]
            })
            .collect()
    }

    fn logits_at(&self, base: &[f64], prev: Option<usize>, out: &mut [f64]) {
        let w = self.n_inputs();
        let dc = self.context_dim;
        out.copy_from_slice(base);
        if let Some(p) = prev {
            for (v, z) in out.iter_mut().enumerate() {
                *z += self.weights[v * w + dc + p];
            }
        }
    }

    /// Next-token distribution after `prefix` (probabilities).
    pub fn next_token_probs(&self, context: &[f64], prev: Option<usize>) -> Vec<f64> {
        let base = self.base_logits(context);
        let mut z = vec![0.0; self.vocab];
        self.logits_at(&base, prev, &mut z);
        softmax_in_place(&mut z);
        z
    }

    pub fn sample(&self, task: &TaskInstance, rng: &mut Rng) -> Rollout {
        let base = self.base_logits(&task.context);
        let mut z = vec![0.0; self.vocab];
        let mut tokens = Vec::with_capacity(self.length);
        let mut logprobs = Vec::with_capacity(self.length);
        let mut prev = None;
        for _ in 0..self.length {
            self.logits_at(&base, prev, &mut z);
            let lse = log_sum_exp(&z);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = self.vocab - 1;
            for (v, &zv) in z.iter().enumerate() {
                acc += (zv - lse).exp();
                if u < acc {
                    chosen = v;
                    break;
                }
            }
            tokens.push(chosen);
            logprobs.push(z[chosen] - lse);
            prev = Some(chosen);
        }
        let total_logprob = logprobs.iter().sum();
        Rollout { task_id: task.id, tokens, logprobs, total_logprob }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() != self.length {
            return Err(Error::LengthMismatch { expected: self.length, got: tokens.len() });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::TokenOutOfRange { token: t, vocab: self.vocab });
        }
        Ok(())
    }

    /// Per-token log-probabilities of `tokens` under this policy.
    pub fn token_logprobs(&self, task: &TaskInstance, tokens: &[usize]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let base = self.base_logits(&task.context);
        let mut z = vec![0.0; self.vocab];
        let mut prev = None;
        Ok(tokens
            .iter()
            .map(|&y| {
                self.logits_at(&base, prev, &mut z);
                prev = Some(y);
                z[y] - log_sum_exp(&z)
            })
            .collect())
    }

    pub fn logprob(&self, task: &TaskInstance, tokens: &[usize]) -> Result<f64> {
        Ok(self.token_logprobs(task, tokens)?.iter().sum())
    }

    /// `∇_W log π(tokens | task)`, same layout as `weights`.
    pub fn grad_logprob(&self, task: &TaskInstance, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.n_params()];
        self.accumulate_grad_logprob(task, tokens, &vec![1.0; tokens.len()], &mut grad)?;
        Ok(grad)
    }

    /// `grad += Σ_t scale_t · ∇ log π(y_t | y_<t, task)`.
    pub fn accumulate_grad_logprob(
        &self,
        task: &TaskInstance,
        tokens: &[usize],
        scales: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        self.check_tokens(tokens)?;
        if grad.len() != self.n_params() || scales.len() != tokens.len() {
            return Err(Error::ShapeMismatch { expected: self.n_params(), got: grad.len() });
        }
        let base = self.base_logits(&task.context);
        let mut z = vec![0.0; self.vocab];
        let mut prev = None;
        for (&y, &s) in tokens.iter().zip(scales) {
            if s != 0.0 {
                self.logits_at(&base, prev, &mut z);
                softmax_in_place(&mut z);
                // d log p_y / d z = onehot(y) − p
                z.iter_mut().for_each(|p| *p = -*p * s);
                z[y] += s;
                self.backprop_logits(&task.context, prev, &z, grad);
            }
            prev = Some(y);
        }
        Ok(())
    }

    /// `grad += dz ⊗ f_t` for the step whose previous token is `prev`.
    pub fn backprop_logits(&self, context: &[f64], prev: Option<usize>, dz: &[f64], grad: &mut [f64]) {
        let w = self.n_inputs();
        let dc = self.context_dim;
        for (v, &d) in dz.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &mut grad[v * w..(v + 1) * w];
            for (g, c) in row[..dc].iter_mut().zip(context) {
                *g += d * c;
            }
            if let Some(p) = prev {
                row[dc + p] += d;
            }
            row[w - 1] += d;
        }
    }

    /// Writes the little-endian checkpoint:
    /// `"PRLP" | version u32 | vocab u32 | length u32 | context_dim u32 | step u64 | weights f64…`.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for dim in [self.vocab, self.length, self.context_dim] {
            out.write_all(&(dim as u32).to_le_bytes())?;
        }
        out.write_all(&self.step.to_le_bytes())?;
        for w in &self.weights {
            out.write_all(&w.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<PolicyParams> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut input)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version mismatch: file has {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let vocab = read_u32(&mut input)? as usize;
        let length = read_u32(&mut input)? as usize;
        let context_dim = read_u32(&mut input)? as usize;
        let mut buf = [0u8; 8];
        input.read_exact(&mut buf)?;
        let step = u64::from_le_bytes(buf);
        if vocab < 2 || length < 1 {
            return Err(Error::Checkpoint("invalid dimensions".into()));
        }
        let n = vocab * (context_dim + vocab + 1);
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            input.read_exact(&mut buf)?;
            let w = f64::from_le_bytes(buf);
            if !w.is_finite() {
                return Err(Error::Checkpoint("non-finite weight".into()));
            }
            weights.push(w);
        }
        Ok(PolicyParams { vocab, length, context_dim, weights, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PolicyParams> {
        PolicyParams::read_checkpoint(std::fs::File::open(path)?)
    }
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in z.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    z.iter_mut().for_each(|x| *x /= s);
}
