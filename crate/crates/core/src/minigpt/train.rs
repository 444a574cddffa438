use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::loss_and_grad;
use super::{ModelConfig, Parameters};
use crate::corpus::{DELIMITER_ID, SPACE_ID};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    /// Stop after this many optimiser steps.
    pub max_steps: Option<usize>,
    /// Draw only this many (shuffled) sequences per epoch.
    pub sequences_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 4,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            max_steps: None,
            sequences_per_epoch: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("invalid Adam hyper-parameters"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Parameters,
    /// Mean batch loss at every optimiser step.
    pub step_loss: Vec<f64>,
    /// Mean loss over each epoch's batches.
    pub epoch_loss: Vec<f64>,
}

struct Adam {
    m: Parameters,
    v: Parameters,
    t: i32,
}

impl Adam {
    fn new(p: &Parameters) -> Self {
        Adam {
            m: p.zeros_like(),
            v: p.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut Parameters, grads: &Parameters, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let ps = params.tensors_mut();
        let gs = grads.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
            for i in 0..p.1.data.len() {
                let gi = g.1.data[i];
                let mi = &mut m.1.data[i];
                let vi = &mut v.1.data[i];
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                p.1.data[i] -= cfg.learning_rate * (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.eps);
            }
        }
    }
}

/// Gradient of the mean loss over a batch. Per-sequence gradients may be
/// computed in parallel; they are summed in batch order so the result does
/// not depend on the thread count.
fn batch_grad(params: &Parameters, batch: &[&Vec<u32>]) -> Result<(f64, Parameters)> {
    let parts: Vec<Result<(f64, Parameters)>> = batch.par_iter().map(|s| loss_and_grad(params, s)).collect();
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        total.add_assign(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    Ok((loss * inv, total))
}

/// Trains from the config's seeded initialisation on explicit sequences.
/// Each sequence is read as input `s[..len−1]`, target `s[1..]`.
pub fn train_sequences(seqs: &[Vec<u32>], model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_from(Parameters::init(model)?, seqs, cfg)
}

pub(super) fn train_from(mut params: Parameters, seqs: &[Vec<u32>], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(bad) = seqs.iter().find(|s| s.len() < 2 || s.len() > params.config.max_seq + 1) {
        return Err(Error::invalid(format!(
            "training sequences need 2..={} tokens, found {}",
            params.config.max_seq + 1,
            bad.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&params);
    let mut step_loss = Vec::new();
    let mut epoch_loss = Vec::new();
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        if step_loss.len() >= max_steps || seqs.is_empty() {
            break;
        }
        order.shuffle(&mut rng);
        let take = cfg.sequences_per_epoch.unwrap_or(order.len()).min(order.len());
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order[..take].chunks(cfg.batch_size) {
            if step_loss.len() >= max_steps {
                if batches > 0 {
                    epoch_loss.push(sum / batches as f64);
                }
                break 'epochs;
            }
            let batch: Vec<&Vec<u32>> = chunk.iter().map(|&i| &seqs[i]).collect();
            let (loss, mut grads) = batch_grad(&params, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step: step_loss.len(),
                    loss,
                });
            }
            if cfg.clip_norm > 0.0 {
                let norm = grads.l2_norm();
                if norm > cfg.clip_norm {
                    grads.scale(cfg.clip_norm / norm);
                }
            }
            adam.step(&mut params, &grads, cfg);
            step_loss.push(loss);
            sum += loss;
            batches += 1;
        }
        epoch_loss.push(sum / batches.max(1) as f64);
        log::info!("epoch {} mean loss {:.4}", epoch + 1, epoch_loss[epoch]);
    }
    params.meta.train_steps = step_loss.len();
    Ok(TrainOutcome {
        params,
        step_loss,
        epoch_loss,
    })
}

/// Trains a causal language model on one long id stream, cut into
/// consecutive windows of `max_seq + 1` tokens (the last may be shorter).
pub fn train(ids: &[u32], model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let w = model.max_seq;
    let seqs: Vec<Vec<u32>> = (0..ids.len().saturating_sub(1))
        .step_by(w)
        .map(|s| ids[s..(s + w + 1).min(ids.len())].to_vec())
        .filter(|s| s.len() >= 2)
        .collect();
    if seqs.is_empty() {
        return Err(Error::invalid("training stream needs at least 2 tokens"));
    }
    train_sequences(&seqs, model, cfg)
}

/// The `k + 5` token sequence for position `t`:
/// `[delim, ids[t−k..t], ids[t], ids[t+1], space, delim]`.
/// Missing left context is padded with delimiter ids and a missing next
/// token is replaced by the space id.
pub fn context_sequence(ids: &[u32], t: usize, k: usize) -> Vec<u32> {
    let mut s = Vec::with_capacity(k + 5);
    s.push(DELIMITER_ID);
    s.extend(std::iter::repeat_n(DELIMITER_ID, k.saturating_sub(t)));
    s.extend_from_slice(&ids[t.saturating_sub(k)..t]);
    s.push(ids[t]);
    s.push(ids.get(t + 1).copied().unwrap_or(SPACE_ID));
    s.push(SPACE_ID);
    s.push(DELIMITER_ID);
    s
}

/// One context-limited training sequence per position `t` with a full
/// `k`-token left context and a following token.
pub fn make_context_batches(ids: &[u32], k: usize) -> Result<Vec<Vec<u32>>> {
    if ids.len() < k + 2 {
        return Err(Error::invalid(format!(
            "stream of {} tokens is too short for context size {k}",
            ids.len()
        )));
    }
    Ok((k..ids.len() - 1).map(|t| context_sequence(ids, t, k)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Compares the analytic gradient with central differences (step `1e-4`)
/// at `n_coords` randomly drawn parameter coordinates.
pub fn gradient_check(params: &Parameters, seq: &[u32], n_coords: usize, seed: u64) -> Result<GradCheckReport> {
    const STEP: f64 = 1e-4;
    const FLOOR: f64 = 1e-6;
    let (_, grads) = loss_and_grad(params, seq)?;
    let sizes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut max_rel: f64 = 0.0;
    for _ in 0..n_coords {
        let mut flat = rng.random_range(0..total);
        let mut ti = 0;
        while flat >= sizes[ti] {
            flat -= sizes[ti];
            ti += 1;
        }
        let analytic = grads.tensors()[ti].1.data[flat];
        let original = params.tensors()[ti].1.data[flat];
        let mut eval = |x: f64| -> Result<f64> {
            probe.tensors_mut()[ti].1.data[flat] = x;
            let (out, _) = super::model::forward_cached(&probe, &seq[..seq.len() - 1])?;
            super::model::lm_loss(&out.logits, &seq[1..], probe.config.vocab_size)
        };
        let numeric = (eval(original + STEP)? - eval(original - STEP)?) / (2.0 * STEP);
        eval(original)?;
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport {
        checked: n_coords,
        max_rel_error: max_rel,
    })
}
