use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::LmConfig;
use super::math;
use super::params::LmParams;
use crate::util::rng;
use crate::{Error, Result};

/// Plain Adam with a fixed learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Sequences per step; each step covers `batch_seqs × context_len` tokens.
    pub batch_seqs: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            batch_seqs: 8,
        }
    }
}

/// Mean training loss at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingRecord {
    pub step: u64,
    pub loss: f64,
}

fn snapshot(config: &LmConfig, params: &LmParams, step: u64, batch_tokens: u64, rng_state: u128) -> Checkpoint {
    let mut params = params.clone();
    params.round_to_f32();
    Checkpoint {
        id: format!("step{step}"),
        step,
        tokens_seen: step * batch_tokens,
        config: config.clone(),
        params,
        rng_state,
    }
}

/// Trains on `sequences` in order, one pass, snapshotting at step 0 and at
/// every step in `schedule`.
pub fn train_lm(
    config: &LmConfig,
    sequences: &[Vec<u32>],
    schedule: &[u64],
    opt: &OptimizerSettings,
    pad: u32,
    mut on_record: impl FnMut(TrainingRecord),
) -> Result<Vec<Checkpoint>> {
    config.validate()?;
    if opt.batch_seqs == 0 || !(opt.lr > 0.0) {
        return Err(Error::Config("batch_seqs and lr must be positive".into()));
    }
    if schedule.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("snapshot schedule must be strictly increasing".into()));
    }
    if let Some(s) = sequences.iter().find(|s| s.len() != config.context_len) {
        return Err(Error::Input(format!(
            "training sequence of length {} (context is {})",
            s.len(),
            config.context_len
        )));
    }
    let mut r = rng(config.seed);
    let mut params = LmParams::init(config, &mut r);
    let word_pos = r.get_word_pos();
    let batch_tokens = (opt.batch_seqs * config.context_len) as u64;
    let last = schedule.last().copied().unwrap_or(0);

    let mut out = vec![snapshot(config, &params, 0, batch_tokens, word_pos)];
    let mut m = LmParams::zeros(config);
    let mut v = LmParams::zeros(config);
    let mut next = schedule.iter().copied().filter(|&s| s > 0).peekable();

    for step in 1..=last {
        let start = (step as usize - 1) * opt.batch_seqs;
        let batch = sequences
            .get(start..start + opt.batch_seqs)
            .ok_or(Error::CorpusExhausted { completed: step - 1, requested: last })?;
        let n_targets: usize = batch
            .iter()
            .map(|s| s.windows(2).filter(|w| w[0] != pad && w[1] != pad).count())
            .sum();
        if n_targets == 0 {
            return Err(Error::Input(format!("batch at step {step} has no targets")));
        }
        let scale = 1.0 / n_targets as f64;
        let mut grads = LmParams::zeros(config);
        let mut nll = 0.0;
        for seq in batch {
            nll += math::train_sequence(&params, config, seq, pad, scale, &mut grads).0;
        }
        let loss = nll * scale;
        if !loss.is_finite() {
            return Err(Error::Numerical {
                step: step as usize,
                component: "lm loss".into(),
            });
        }
        on_record(TrainingRecord { step, loss });

        let t = step as i32;
        let bc1 = 1.0 - opt.beta1.powi(t);
        let bc2 = 1.0 - opt.beta2.powi(t);
        for (((p, g), m), v) in params
            .slices_mut()
            .into_iter()
            .zip(grads.slices_mut())
            .zip(m.slices_mut())
            .zip(v.slices_mut())
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * gi;
                v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * gi * gi;
                p[i] -= opt.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + opt.eps);
            }
        }

        if next.peek() == Some(&step) {
            next.next();
            out.push(snapshot(config, &params, step, batch_tokens, word_pos));
        }
    }
    Ok(out)
}
