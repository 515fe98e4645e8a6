//! Sparse crosscoders over one to three activation sources.
//!
//! ```text
//! f    = ReLU(Σ_c W_enc^c x_c + b_enc)
//! x̂_c  = W_dec^c f + b_dec^c
//! L    = Σ_c ‖x_c − x̂_c‖² + λ_t Σ_c Σ_i f_i ‖W_dec^c[i]‖
//! ```
//!
//! Weight matrices are stored `D × d`: row `i` of `W_dec^c` is feature `i`'s
//! direction in source `c`. Batch losses are sums over rows. A single source
//! is a plain sparse autoencoder.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::actstore::{Batch, NormStats};
use crate::container::{self, NamedTensor};
use crate::toylm::Checkpoint;
use crate::util::{rng, write_atomic};
use crate::{Error, Result};

pub const CROSSCODER_MAGIC: &[u8; 4] = b"XCCX";
pub const MAX_SOURCES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct CrosscoderParams {
    pub sources: Vec<String>,
    pub w_enc: Vec<Array2<f64>>,
    pub b_enc: Array1<f64>,
    pub w_dec: Vec<Array2<f64>>,
    pub b_dec: Vec<Array1<f64>>,
}

/// Loss value split into its parts; `total = Σ recon + sparsity`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub recon: Vec<f64>,
    pub sparsity: f64,
    /// Number of non-zero feature activations in the batch.
    pub active: usize,
}

fn check_sources(sources: &[String]) -> Result<()> {
    if sources.is_empty() || sources.len() > MAX_SOURCES {
        return Err(Error::Config(format!(
            "a crosscoder needs 1 to {MAX_SOURCES} sources, got {}",
            sources.len()
        )));
    }
    for (i, s) in sources.iter().enumerate() {
        if sources[..i].contains(s) {
            return Err(Error::Config(format!("duplicate source {s}")));
        }
    }
    Ok(())
}

impl CrosscoderParams {
    pub fn zeros(sources: Vec<String>, dict_size: usize, d_model: usize) -> Result<Self> {
        check_sources(&sources)?;
        if dict_size == 0 || d_model == 0 {
            return Err(Error::Config("dict_size and d_model must be positive".into()));
        }
        let n = sources.len();
        Ok(CrosscoderParams {
            sources,
            w_enc: vec![Array2::zeros((dict_size, d_model)); n],
            b_enc: Array1::zeros(dict_size),
            w_dec: vec![Array2::zeros((dict_size, d_model)); n],
            b_dec: vec![Array1::zeros(d_model); n],
        })
    }

    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn dict_size(&self) -> usize {
        self.b_enc.len()
    }

    pub fn d_model(&self) -> usize {
        self.b_dec[0].len()
    }

    pub fn source_index(&self, source: &str) -> Result<usize> {
        self.sources
            .iter()
            .position(|s| s == source)
            .ok_or_else(|| Error::Input(format!("unknown source {source}; crosscoder sources are {:?}", self.sources)))
    }

    fn check_batch(&self, xs: &[Array2<f64>]) -> Result<usize> {
        if xs.len() != self.n_sources() {
            return Err(Error::Input(format!(
                "{} source inputs for a crosscoder with {} sources",
                xs.len(),
                self.n_sources()
            )));
        }
        let b = xs[0].nrows();
        if xs.iter().any(|x| x.nrows() != b || x.ncols() != self.d_model()) {
            return Err(Error::Input(format!(
                "source inputs must all be {b} × {}",
                self.d_model()
            )));
        }
        Ok(b)
    }

    /// Encoder pre-activations, `B × D`.
    pub fn preactivations(&self, xs: &[Array2<f64>]) -> Result<Array2<f64>> {
        self.check_batch(xs)?;
        let mut pre = xs[0].dot(&self.w_enc[0].t());
        for (x, w) in xs.iter().zip(&self.w_enc).skip(1) {
            ndarray::linalg::general_mat_mul(1.0, x, &w.t(), 1.0, &mut pre);
        }
        pre += &self.b_enc;
        Ok(pre)
    }

    /// Feature activations for a batch of aligned rows, `B × D`.
    pub fn encode_batch(&self, xs: &[Array2<f64>]) -> Result<Array2<f64>> {
        let mut f = self.preactivations(xs)?;
        f.mapv_inplace(|v| v.max(0.0));
        Ok(f)
    }

    /// Feature activations for one token, given one vector per source.
    pub fn encode(&self, xs: &[ArrayView1<f64>]) -> Result<Array1<f64>> {
        let rows: Vec<Array2<f64>> = xs.iter().map(|x| x.to_owned().insert_axis(Axis(0))).collect();
        Ok(self.encode_batch(&rows)?.row(0).to_owned())
    }

    /// Reconstruction of source `c` for a batch of feature vectors.
    pub fn decode_batch(&self, f: &Array2<f64>, c: usize) -> Result<Array2<f64>> {
        if c >= self.n_sources() {
            return Err(Error::Input(format!("source index {c} out of range")));
        }
        if f.ncols() != self.dict_size() {
            return Err(Error::Input(format!("feature width {} != dict size {}", f.ncols(), self.dict_size())));
        }
        Ok(f.dot(&self.w_dec[c]) + &self.b_dec[c])
    }

    pub fn decode(&self, f: ArrayView1<f64>, source: &str) -> Result<Array1<f64>> {
        let c = self.source_index(source)?;
        let f2 = f.to_owned().insert_axis(Axis(0));
        Ok(self.decode_batch(&f2, c)?.row(0).to_owned())
    }

    /// Per-feature decoder norms `‖W_dec^c[i]‖`.
    pub fn dec_norms(&self, c: usize) -> Array1<f64> {
        self.w_dec[c].map_axis(Axis(1), |r| r.dot(&r).sqrt())
    }

    pub fn loss(&self, xs: &[Array2<f64>], lambda: f64) -> Result<LossParts> {
        let f = self.encode_batch(xs)?;
        Ok(self.loss_from_features(xs, &f, lambda))
    }

    fn loss_from_features(&self, xs: &[Array2<f64>], f: &Array2<f64>, lambda: f64) -> LossParts {
        let mut recon = Vec::with_capacity(self.n_sources());
        for (c, x) in xs.iter().enumerate() {
            let xh = f.dot(&self.w_dec[c]) + &self.b_dec[c];
            recon.push((&xh - x).mapv(|v| v * v).sum());
        }
        let fsum = f.sum_axis(Axis(0));
        let norm_sum = (0..self.n_sources()).fold(Array1::zeros(self.dict_size()), |acc, c| acc + self.dec_norms(c));
        let sparsity = lambda * fsum.dot(&norm_sum);
        LossParts {
            total: recon.iter().sum::<f64>() + sparsity,
            recon,
            sparsity,
            active: f.iter().filter(|&&v| v > 0.0).count(),
        }
    }

    /// Loss and gradients for every parameter tensor. The ReLU and the
    /// decoder-norm gradients are taken as 0 at 0. Everything after the
    /// encoder pre-activations runs over active (row, feature) entries only.
    pub fn loss_grad(&self, xs: &[Array2<f64>], lambda: f64) -> Result<(LossParts, CrosscoderParams)> {
        let pre = self.preactivations(xs)?;
        let n = self.n_sources();
        let dsz = self.dict_size();
        let d = self.d_model();
        let rows = pre.nrows();

        // CSR of f.
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut idx: Vec<usize> = Vec::new();
        let mut val: Vec<f64> = Vec::new();
        indptr.push(0);
        for row in pre.rows() {
            for (i, &v) in row.iter().enumerate() {
                if v > 0.0 {
                    idx.push(i);
                    val.push(v);
                }
            }
            indptr.push(idx.len());
        }
        drop(pre);

        let mut fsum = Array1::<f64>::zeros(dsz);
        for (&i, &v) in idx.iter().zip(&val) {
            fsum[i] += v;
        }
        let norms: Vec<Array1<f64>> = (0..n).map(|c| self.dec_norms(c)).collect();
        let norm_sum = norms.iter().fold(Array1::zeros(dsz), |acc, v| acc + v);

        let mut g = CrosscoderParams::zeros(self.sources.clone(), dsz, d)?;
        let mut recon = vec![0.0; n];
        // dL/df at active entries: λ·Σ_c‖W_dec^c[i]‖ + Σ_c 2 r_c·W_dec^c[i].
        let mut dval: Vec<f64> = idx.iter().map(|&i| lambda * norm_sum[i]).collect();
        let mut r = vec![0.0; d];
        for c in 0..n {
            let w = self.w_dec[c].as_slice().expect("standard layout");
            let gw = g.w_dec[c].as_slice_mut().expect("standard layout");
            let bdec = self.b_dec[c].as_slice().expect("standard layout");
            let mut gb = vec![0.0; d];
            for b in 0..rows {
                r.copy_from_slice(bdec);
                for k in indptr[b]..indptr[b + 1] {
                    let wi = &w[idx[k] * d..(idx[k] + 1) * d];
                    let v = val[k];
                    r.iter_mut().zip(wi).for_each(|(o, &x)| *o += v * x);
                }
                let x = xs[c].row(b);
                let mut sq = 0.0;
                for (o, &xv) in r.iter_mut().zip(x.iter()) {
                    *o -= xv;
                    sq += *o * *o;
                    *o *= 2.0;
                }
                recon[c] += sq;
                gb.iter_mut().zip(&r).for_each(|(o, &x)| *o += x);
                for k in indptr[b]..indptr[b + 1] {
                    let i = idx[k];
                    let wi = &w[i * d..(i + 1) * d];
                    dval[k] += wi.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
                    let v = val[k];
                    gw[i * d..(i + 1) * d].iter_mut().zip(&r).for_each(|(o, &x)| *o += v * x);
                }
            }
            g.b_dec[c] = Array1::from(gb);
            for i in 0..dsz {
                if norms[c][i] > 0.0 && fsum[i] != 0.0 {
                    let s = lambda * fsum[i] / norms[c][i];
                    gw[i * d..(i + 1) * d].iter_mut().zip(&w[i * d..(i + 1) * d]).for_each(|(o, &x)| *o += s * x);
                }
            }
        }
        for (&i, &dv) in idx.iter().zip(&dval) {
            g.b_enc[i] += dv;
        }
        for c in 0..n {
            let ge = g.w_enc[c].as_slice_mut().expect("standard layout");
            for b in 0..rows {
                let x = xs[c].row(b);
                for k in indptr[b]..indptr[b + 1] {
                    let i = idx[k];
                    let dv = dval[k];
                    ge[i * d..(i + 1) * d].iter_mut().zip(x.iter()).for_each(|(o, &xv)| *o += dv * xv);
                }
            }
        }
        let sparsity = lambda * fsum.dot(&norm_sum);
        let parts = LossParts {
            total: recon.iter().sum::<f64>() + sparsity,
            recon,
            sparsity,
            active: idx.len(),
        };
        Ok((parts, g))
    }

    /// Every tensor in a fixed order, for optimizers and containers.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for c in 0..self.n_sources() {
            out.push((format!("w_enc.{c}"), self.w_enc[c].as_slice().unwrap()));
        }
        out.push(("b_enc".to_string(), self.b_enc.as_slice().unwrap()));
        for c in 0..self.n_sources() {
            out.push((format!("w_dec.{c}"), self.w_dec[c].as_slice().unwrap()));
            out.push((format!("b_dec.{c}"), self.b_dec[c].as_slice().unwrap()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for w in &mut self.w_enc {
            out.push(w.as_slice_mut().unwrap());
        }
        out.push(self.b_enc.as_slice_mut().unwrap());
        for (w, b) in self.w_dec.iter_mut().zip(self.b_dec.iter_mut()) {
            out.push(w.as_slice_mut().unwrap());
            out.push(b.as_slice_mut().unwrap());
        }
        out
    }

    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CrosscoderHeader {
    sources: Vec<String>,
    dict_size: usize,
    d_model: usize,
    norms: Vec<NormStats>,
}

/// Writes params and the normalization of their training shards.
pub fn save_crosscoder(path: &Path, params: &CrosscoderParams, norms: &[NormStats]) -> Result<()> {
    let header = CrosscoderHeader {
        sources: params.sources.clone(),
        dict_size: params.dict_size(),
        d_model: params.d_model(),
        norms: norms.to_vec(),
    };
    let (dsz, d) = (params.dict_size(), params.d_model());
    let tensors: Vec<NamedTensor> = params
        .tensors()
        .into_iter()
        .map(|(name, data)| {
            let dims = if name.starts_with("w_") {
                vec![dsz, d]
            } else if name == "b_enc" {
                vec![dsz]
            } else {
                vec![d]
            };
            NamedTensor::from_f64(name, dims, data.iter().copied())
        })
        .collect();
    let json = serde_json::to_string(&header).expect("header serializes");
    write_atomic(path, &container::encode(CROSSCODER_MAGIC, &json, &tensors))
}

pub fn load_crosscoder(path: &Path) -> Result<(CrosscoderParams, Vec<NormStats>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (json, tensors) = container::decode(&bytes, CROSSCODER_MAGIC, path)?;
    let h: CrosscoderHeader = serde_json::from_str(&json).map_err(|e| Error::format(path, format!("header: {e}")))?;
    if h.norms.len() != h.sources.len() {
        return Err(Error::format(path, "one norm record per source expected"));
    }
    let mut p = CrosscoderParams::zeros(h.sources, h.dict_size, h.d_model)?;
    let (dsz, d) = (h.dict_size, h.d_model);
    for c in 0..p.n_sources() {
        p.w_enc[c] = Array2::from_shape_vec((dsz, d), container::take_tensor(&tensors, &format!("w_enc.{c}"), &[dsz, d], path)?)
            .expect("shape checked");
        p.w_dec[c] = Array2::from_shape_vec((dsz, d), container::take_tensor(&tensors, &format!("w_dec.{c}"), &[dsz, d], path)?)
            .expect("shape checked");
        p.b_dec[c] = Array1::from(container::take_tensor(&tensors, &format!("b_dec.{c}"), &[d], path)?);
    }
    p.b_enc = Array1::from(container::take_tensor(&tensors, "b_enc", &[dsz], path)?);
    Ok((p, h.norms))
}

/// Crosscoder training hyperparameters. Defaults are the reference values
/// for 1B-scale models; desk-scale configs override `lr`, `steps` and
/// `dict_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHP {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l1_coeff: f64,
    pub warmup_fraction: f64,
    pub steps: usize,
    pub batch_tokens: usize,
    pub dec_init_norm: f64,
    pub dict_size: usize,
    pub seed: u64,
    /// Training-log interval in steps.
    pub log_every: usize,
}

impl Default for TrainHP {
    fn default() -> Self {
        TrainHP {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l1_coeff: 2.0,
            warmup_fraction: 0.05,
            steps: 1000,
            batch_tokens: 4096,
            dec_init_norm: 0.08,
            dict_size: 16384,
            seed: 124,
            log_every: 1,
        }
    }
}

impl TrainHP {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup_fraction {} outside [0, 1]", self.warmup_fraction)));
        }
        if !(self.l1_coeff >= 0.0) {
            return Err(Error::Config("l1_coeff must be non-negative".into()));
        }
        if !(self.dec_init_norm > 0.0) {
            return Err(Error::Config("dec_init_norm must be positive".into()));
        }
        if !(self.lr > 0.0) || self.steps == 0 || self.batch_tokens == 0 || self.dict_size == 0 || self.log_every == 0 {
            return Err(Error::Config("lr, steps, batch_tokens, dict_size and log_every must be positive".into()));
        }
        Ok(())
    }

    /// Sparsity coefficient at step `t` (0-based).
    pub fn lambda_at(&self, t: usize) -> f64 {
        let ramp = self.warmup_fraction * self.steps as f64;
        if ramp <= 0.0 {
            self.l1_coeff
        } else {
            self.l1_coeff * (t as f64 / ramp).min(1.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lambda: f64,
    pub total: f64,
    pub recon: Vec<f64>,
    pub sparsity: f64,
    pub l0: f64,
    pub rows: usize,
}

/// Random decoder rows of norm `dec_init_norm`, drawn independently per
/// source, zero biases, and encoders equal to the decoders scaled so that
/// pre-activations on `calib` have unit standard deviation.
pub fn init_params(sources: Vec<String>, d_model: usize, hp: &TrainHP, calib: &[Array2<f64>]) -> Result<CrosscoderParams> {
    let mut p = CrosscoderParams::zeros(sources, hp.dict_size, d_model)?;
    let mut r = rng(hp.seed);
    for w in &mut p.w_dec {
        for mut row in w.rows_mut() {
            row.iter_mut().for_each(|v| *v = r.sample(StandardNormal));
            let n = row.dot(&row).sqrt();
            row *= hp.dec_init_norm / n;
        }
    }
    p.w_enc = p.w_dec.clone();
    let pre = p.preactivations(calib)?;
    let n = pre.len() as f64;
    let mean = pre.sum() / n;
    let std = (pre.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::Input("calibration batch gives zero pre-activation variance".into()));
    }
    for w in &mut p.w_enc {
        *w /= std;
    }
    Ok(p)
}

/// Adam on the summed batch loss with a linear sparsity warmup. The first
/// batch also serves as the encoder calibration batch.
pub fn train_crosscoder(
    hp: &TrainHP,
    sources: Vec<String>,
    mut stream: impl Iterator<Item = Batch>,
    mut on_log: impl FnMut(&LogRecord),
) -> Result<(CrosscoderParams, Vec<LogRecord>)> {
    hp.validate()?;
    let first = stream.next().ok_or_else(|| Error::Input("empty batch stream".into()))?;
    let d = first.xs.first().map(|x| x.ncols()).ok_or_else(|| Error::Input("batch without sources".into()))?;
    let mut params = init_params(sources, d, hp, &first.xs)?;
    let mut m = CrosscoderParams::zeros(params.sources.clone(), hp.dict_size, d)?;
    let mut v = m.clone();
    let mut log = Vec::new();
    let mut batch = Some(first);
    for t in 0..hp.steps {
        let b = match batch.take() {
            Some(b) => b,
            None => stream.next().ok_or_else(|| Error::Input("batch stream ended early".into()))?,
        };
        let lambda = hp.lambda_at(t);
        let (parts, mut g) = params.loss_grad(&b.xs, lambda)?;
        if let Some(c) = parts.recon.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical { step: t, component: format!("reconstruction loss of source {}", params.sources[c]) });
        }
        if !parts.sparsity.is_finite() {
            return Err(Error::Numerical { step: t, component: "sparsity loss".into() });
        }
        if t % hp.log_every == 0 || t + 1 == hp.steps {
            let l0 = parts.active as f64 / b.rows.len() as f64;
            let rec = LogRecord {
                step: t,
                lambda,
                total: parts.total,
                recon: parts.recon.clone(),
                sparsity: parts.sparsity,
                l0,
                rows: b.rows.len(),
            };
            on_log(&rec);
            log.push(rec);
        }
        let k = (t + 1) as i32;
        let bc1 = 1.0 - hp.beta1.powi(k);
        let bc2 = 1.0 - hp.beta2.powi(k);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(g.tensors_mut())
            .zip(m.tensors_mut())
            .zip(v.tensors_mut())
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * gi;
                v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * gi * gi;
                p[i] -= hp.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + hp.eps);
            }
        }
    }
    Ok((params, log))
}

/// Reconstruction quality on held-out data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrosscoderEval {
    pub l0: f64,
    pub dead_count: usize,
    pub dict_size: usize,
    /// Token-mean cross-entropy increase per source.
    pub delta_ce: Vec<f64>,
    pub frac_variance_explained: Vec<f64>,
    pub rows: usize,
}

/// Evaluates a crosscoder on validation sequences. Activations are captured
/// from `ckpts` (in source order) at every position whose token is not in
/// `skip`; cross-entropy is compared with those positions replaced by
/// `s_c · x̂_c`.
pub fn eval_crosscoder(
    params: &CrosscoderParams,
    norms: &[NormStats],
    ckpts: &[&Checkpoint],
    sequences: &[Vec<u32>],
    skip: &[u32],
    pad: u32,
) -> Result<CrosscoderEval> {
    let n = params.n_sources();
    if ckpts.len() != n || norms.len() != n {
        return Err(Error::Input(format!("{n} checkpoints and norm records required")));
    }
    for c in 0..n {
        if ckpts[c].id != params.sources[c] || norms[c].source != params.sources[c] {
            return Err(Error::Input(format!(
                "checkpoint {} / norm {} do not match source {}",
                ckpts[c].id, norms[c].source, params.sources[c]
            )));
        }
    }
    let dsz = params.dict_size();
    let d = params.d_model();
    let mut alive = vec![false; dsz];
    let mut active = 0usize;
    let mut rows = 0usize;
    let mut ce_clean = vec![0.0; n];
    let mut ce_patch = vec![0.0; n];
    let mut n_targets = 0usize;
    let mut sse = vec![0.0; n];
    let mut sum = vec![Array1::<f64>::zeros(d); n];
    let mut sumsq = vec![0.0; n];

    for seq in sequences {
        let keep: Vec<usize> = (0..seq.len()).filter(|&p| !skip.contains(&seq[p])).collect();
        if keep.is_empty() {
            continue;
        }
        let acts: Vec<Array2<f64>> = ckpts.iter().map(|c| c.capture_midlayer(seq)).collect::<Result<_>>()?;
        let xs: Vec<Array2<f64>> = acts
            .iter()
            .zip(norms)
            .map(|(a, nm)| a.select(Axis(0), &keep) / nm.scale)
            .collect();
        let f = params.encode_batch(&xs)?;
        for row in f.rows() {
            for (i, &v) in row.iter().enumerate() {
                if v > 0.0 {
                    alive[i] = true;
                    active += 1;
                }
            }
        }
        rows += keep.len();
        for c in 0..n {
            let xh = params.decode_batch(&f, c)?;
            sse[c] += (&xh - &xs[c]).mapv(|v| v * v).sum();
            sum[c] += &xs[c].sum_axis(Axis(0));
            sumsq[c] += xs[c].mapv(|v| v * v).sum();

            let mut patched = acts[c].clone();
            for (k, &p) in keep.iter().enumerate() {
                patched.row_mut(p).assign(&(&xh.row(k) * norms[c].scale));
            }
            let lp_clean = ckpts[c].forward_from_midlayer(acts[c].view())?;
            let lp_patch = ckpts[c].forward_from_midlayer(patched.view())?;
            let (a, cnt) = Checkpoint::sequence_nll(&lp_clean.view(), seq, pad);
            let (b, _) = Checkpoint::sequence_nll(&lp_patch.view(), seq, pad);
            ce_clean[c] += a;
            ce_patch[c] += b;
            if c == 0 {
                n_targets += cnt;
            }
        }
    }
    if rows == 0 || n_targets == 0 {
        return Err(Error::Input("validation set has no usable tokens".into()));
    }
    let fve = (0..n)
        .map(|c| {
            let mean = &sum[c] / rows as f64;
            let total_var = sumsq[c] - rows as f64 * mean.dot(&mean);
            1.0 - sse[c] / total_var
        })
        .collect();
    Ok(CrosscoderEval {
        l0: active as f64 / rows as f64,
        dead_count: alive.iter().filter(|a| !**a).count(),
        dict_size: dsz,
        delta_ce: (0..n).map(|c| (ce_patch[c] - ce_clean[c]) / n_targets as f64).collect(),
        frac_variance_explained: fve,
        rows,
    })
}
