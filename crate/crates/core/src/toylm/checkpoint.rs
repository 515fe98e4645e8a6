use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::config::LmConfig;
use super::math;
use super::params::LmParams;
use crate::container;
use crate::util::write_atomic;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XCLM";

/// Arguments of the log-probability-difference metric at one position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricSpec {
    pub correct: u32,
    pub wrong: u32,
    pub position: usize,
}

/// A snapshot of model parameters from one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub id: String,
    pub step: u64,
    pub tokens_seen: u64,
    pub config: LmConfig,
    pub params: LmParams,
    /// ChaCha word position of the training RNG when the snapshot was taken.
    pub rng_state: u128,
}

/// Sidecar record stored next to each checkpoint file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub id: String,
    pub step: u64,
    pub tokens_seen: u64,
    pub seed: u64,
    pub rng_state: String,
}

impl Checkpoint {
    pub fn meta_path(path: &Path) -> PathBuf {
        path.with_extension("meta.json")
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.context_len {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds context {}",
                tokens.len(),
                self.config.context_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {t} out of range for vocab of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn check_acts(&self, acts: &ArrayView2<f64>) -> Result<()> {
        let (t, d) = acts.dim();
        if d != self.config.d_model || t == 0 || t > self.config.context_len {
            return Err(Error::Input(format!(
                "activation shape ({t}, {d}) incompatible with d_model {} and context {}",
                self.config.d_model, self.config.context_len
            )));
        }
        Ok(())
    }

    /// Per-position next-token log-probabilities, `len(tokens) × vocab`.
    pub fn forward_logits(&self, tokens: &[u32]) -> Result<Array2<f64>> {
        let acts = self.capture_midlayer(tokens)?;
        self.forward_from_midlayer(acts.view())
    }

    /// Residual stream after block `mid_layer`, `len(tokens) × d_model`.
    pub fn capture_midlayer(&self, tokens: &[u32]) -> Result<Array2<f64>> {
        self.check_tokens(tokens)?;
        let x0 = math::embed(&self.params, tokens);
        let (x, _) = math::run_blocks(&self.params, &self.config, x0, 0..self.config.mid_layer, tokens.len());
        Ok(x)
    }

    /// Runs the remaining blocks and the head on (possibly patched) mid-layer
    /// activations.
    pub fn forward_from_midlayer(&self, acts: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_acts(&acts)?;
        let (x, _) = math::run_blocks(
            &self.params,
            &self.config,
            acts.to_owned(),
            self.config.mid_layer..self.config.n_layers,
            acts.nrows(),
        );
        Ok(math::head_forward(&self.params, &x).0)
    }

    /// `m = log p(wrong) − log p(correct)` at `metric.position`, computed from
    /// patched mid-layer activations.
    pub fn metric_from_midlayer(&self, acts: ArrayView2<f64>, metric: &MetricSpec) -> Result<f64> {
        let logp = self.forward_from_midlayer(acts)?;
        self.check_metric(&logp.view(), metric)?;
        Ok(logp[[metric.position, metric.wrong as usize]] - logp[[metric.position, metric.correct as usize]])
    }

    fn check_metric(&self, acts: &ArrayView2<f64>, metric: &MetricSpec) -> Result<()> {
        if metric.position >= acts.nrows() {
            return Err(Error::Input(format!(
                "metric position {} outside {} positions",
                metric.position,
                acts.nrows()
            )));
        }
        for t in [metric.correct, metric.wrong] {
            if t as usize >= self.config.vocab_size {
                return Err(Error::Input(format!("metric token {t} out of vocab range")));
            }
        }
        Ok(())
    }

    /// Value of `m` and `∂m/∂acts` (same shape as `acts`).
    pub fn grad_metric_wrt_midlayer(&self, acts: ArrayView2<f64>, metric: &MetricSpec) -> Result<(f64, Array2<f64>)> {
        let mut out = self.grad_metric_wrt_midlayer_batch(&[acts], metric)?;
        Ok(out.pop().expect("one input, one output"))
    }

    /// [`Self::grad_metric_wrt_midlayer`] for several same-shape activation
    /// matrices, evaluated as one stacked pass.
    pub fn grad_metric_wrt_midlayer_batch(&self, acts: &[ArrayView2<f64>], metric: &MetricSpec) -> Result<Vec<(f64, Array2<f64>)>> {
        let Some(first) = acts.first() else {
            return Ok(Vec::new());
        };
        let t = first.nrows();
        for a in acts {
            self.check_acts(a)?;
            if a.nrows() != t {
                return Err(Error::Input("batched activations must share one length".into()));
            }
        }
        self.check_metric(first, metric)?;
        let stacked = ndarray::concatenate(Axis(0), acts).expect("equal widths checked");
        let range = self.config.mid_layer..self.config.n_layers;
        let (x, caches) = math::run_blocks(&self.params, &self.config, stacked, range.clone(), t);
        // Only the metric row of each segment reaches the head.
        let rows: Vec<usize> = (0..acts.len()).map(|b| b * t + metric.position).collect();
        let (logp, hc) = math::head_forward(&self.params, &x.select(Axis(0), &rows));
        // The log-normalizer cancels in m, so its logit gradient is e_wrong − e_correct.
        let mut dlogits = Array2::zeros(logp.raw_dim());
        dlogits.column_mut(metric.wrong as usize).fill(1.0);
        dlogits.column_mut(metric.correct as usize).fill(-1.0);
        let dsel = math::head_backward(&self.params, &hc, &dlogits, None);
        let mut dx = Array2::zeros(x.raw_dim());
        for (k, &r) in rows.iter().enumerate() {
            dx.row_mut(r).assign(&dsel.row(k));
        }
        let grad = math::backward_blocks(&self.params, &self.config, &caches, range, t, dx, None);
        Ok((0..acts.len())
            .map(|b| {
                let m = logp[[b, metric.wrong as usize]] - logp[[b, metric.correct as usize]];
                (m, grad.slice(ndarray::s![b * t..(b + 1) * t, ..]).to_owned())
            })
            .collect())
    }

    /// Summed next-token NLL and target count over one sequence, with
    /// targets equal to `pad` ignored.
    pub fn sequence_nll(logp: &ArrayView2<f64>, tokens: &[u32], pad: u32) -> (f64, usize) {
        let (nll, count, _) = math::nll_and_dlogits(logp, tokens, pad, 0.0);
        (nll, count)
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            id: self.id.clone(),
            step: self.step,
            tokens_seen: self.tokens_seen,
            seed: self.config.seed,
            rng_state: format!("{:032x}", self.rng_state),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_string(&self.config).expect("config serializes");
        container::encode(CHECKPOINT_MAGIC, &header, &self.params.to_tensors())
    }

    /// Writes the container and its `.meta.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())?;
        let meta = serde_json::to_string_pretty(&self.meta()).expect("meta serializes");
        write_atomic(&Self::meta_path(path), meta.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (header, tensors) = container::decode(&bytes, CHECKPOINT_MAGIC, path)?;
        let config: LmConfig =
            serde_json::from_str(&header).map_err(|e| Error::format(path, format!("config block: {e}")))?;
        config.validate()?;
        let params = LmParams::from_tensors(&config, &tensors, path)?;
        let meta_path = Self::meta_path(path);
        let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&meta_text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
        let rng_state = u128::from_str_radix(&meta.rng_state, 16)
            .map_err(|_| Error::format(&meta_path, "rng_state is not hex"))?;
        Ok(Checkpoint {
            id: meta.id,
            step: meta.step,
            tokens_seen: meta.tokens_seen,
            config,
            params,
            rng_state,
        })
    }
}
