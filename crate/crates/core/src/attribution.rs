//! Indirect-effect attribution of crosscoder features to checkpoints.
//!
//! Interventions use error-frozen patching: for source `c` the mid-layer
//! activation at each patched position is `a = e + s_c·x̂_c`, with the error
//! `e` computed on the clean input and held fixed while features change.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::actstore::NormStats;
use crate::corpus::MinimalPair;
use crate::dictcore::CrosscoderParams;
use crate::toylm::{Checkpoint, MetricSpec};
use crate::util::{fmt_f64, write_atomic};
use crate::{Error, Result};

/// Anything that exposes mid-layer activations and the metric
/// `m = log p(wrong) − log p(correct)` as a function of them.
pub trait MidLayerModel {
    fn id(&self) -> &str;
    fn capture(&self, tokens: &[u32]) -> Result<Array2<f64>>;
    fn metric(&self, acts: ArrayView2<f64>, spec: &MetricSpec) -> Result<f64>;
    fn metric_grad(&self, acts: ArrayView2<f64>, spec: &MetricSpec) -> Result<(f64, Array2<f64>)>;

    /// `metric_grad` over several same-shape inputs.
    fn metric_grad_batch(&self, acts: &[ArrayView2<f64>], spec: &MetricSpec) -> Result<Vec<(f64, Array2<f64>)>> {
        acts.iter().map(|a| self.metric_grad(a.view(), spec)).collect()
    }
}

impl MidLayerModel for Checkpoint {
    fn id(&self) -> &str {
        &self.id
    }

    fn capture(&self, tokens: &[u32]) -> Result<Array2<f64>> {
        self.capture_midlayer(tokens)
    }

    fn metric(&self, acts: ArrayView2<f64>, spec: &MetricSpec) -> Result<f64> {
        self.metric_from_midlayer(acts, spec)
    }

    fn metric_grad(&self, acts: ArrayView2<f64>, spec: &MetricSpec) -> Result<(f64, Array2<f64>)> {
        self.grad_metric_wrt_midlayer(acts, spec)
    }

    fn metric_grad_batch(&self, acts: &[ArrayView2<f64>], spec: &MetricSpec) -> Result<Vec<(f64, Array2<f64>)>> {
        self.grad_metric_wrt_midlayer_batch(acts, spec)
    }
}

/// Rows per stacked gradient evaluation on the per-feature path.
const PATH_BATCH_ROWS: usize = 1024;

/// `m` for a minimal pair evaluated at its last prefix token.
pub fn metric_m(model: &dyn MidLayerModel, pair: &MinimalPair, bos: u32) -> Result<f64> {
    let tokens = pair.model_input(bos);
    let spec = metric_spec(pair, tokens.len());
    model.metric(model.capture(&tokens)?.view(), &spec)
}

fn metric_spec(pair: &MinimalPair, len: usize) -> MetricSpec {
    MetricSpec {
        correct: pair.correct,
        wrong: pair.wrong,
        position: len - 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionPolicy {
    /// Every prefix position after BOS.
    AllPrefix,
    /// Only the last prefix token.
    FinalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionAggregate {
    Sum,
    Mean,
}

/// Which straight line in feature space the gradients are averaged along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IgPath {
    /// One path per active feature, from `f` to `f` with that feature
    /// zeroed. The clean-point gradient is shared; every other point costs
    /// one gradient per active feature.
    PerFeature,
    /// All features shrink together, `f(α) = (1 − α)·f`; one gradient per α
    /// serves every feature.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IGConfig {
    pub n_steps: usize,
    pub threshold: f64,
    pub positions: PositionPolicy,
    pub aggregate: PositionAggregate,
    pub path: IgPath,
}

impl Default for IGConfig {
    fn default() -> Self {
        IGConfig {
            n_steps: 10,
            threshold: 0.1,
            positions: PositionPolicy::AllPrefix,
            aggregate: PositionAggregate::Sum,
            path: IgPath::PerFeature,
        }
    }
}

impl IGConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("integrated-gradients n_steps must be at least 1".into()));
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::Config("threshold must be non-negative".into()));
        }
        Ok(())
    }
}

/// A crosscoder together with the models for each of its sources.
pub struct AttributionContext<'a> {
    pub params: &'a CrosscoderParams,
    pub norms: &'a [NormStats],
    pub models: Vec<&'a dyn MidLayerModel>,
    pub bos: u32,
}

/// Clean quantities for one pair, shared by all interventions on it.
pub struct Prepared {
    pub acts: Vec<Array2<f64>>,
    pub positions: Vec<usize>,
    /// Feature activations at `positions`, `|P| × D`.
    pub f: Array2<f64>,
    pub spec: MetricSpec,
}

impl<'a> AttributionContext<'a> {
    pub fn new(
        params: &'a CrosscoderParams,
        norms: &'a [NormStats],
        models: Vec<&'a dyn MidLayerModel>,
        bos: u32,
    ) -> Result<Self> {
        let n = params.n_sources();
        if models.len() != n || norms.len() != n {
            return Err(Error::Input(format!("{n} models and norm records required")));
        }
        for c in 0..n {
            if models[c].id() != params.sources[c] || norms[c].source != params.sources[c] {
                return Err(Error::Input(format!(
                    "model {} / norm {} do not match crosscoder source {}",
                    models[c].id(),
                    norms[c].source,
                    params.sources[c]
                )));
            }
        }
        Ok(AttributionContext { params, norms, models, bos })
    }

    pub fn n_sources(&self) -> usize {
        self.params.n_sources()
    }

    pub fn prepare(&self, pair: &MinimalPair, policy: PositionPolicy) -> Result<Prepared> {
        let tokens = pair.model_input(self.bos);
        let spec = metric_spec(pair, tokens.len());
        let positions: Vec<usize> = match policy {
            PositionPolicy::AllPrefix => (1..tokens.len()).collect(),
            PositionPolicy::FinalOnly => vec![tokens.len() - 1],
        };
        let acts: Vec<Array2<f64>> = self.models.iter().map(|m| m.capture(&tokens)).collect::<Result<_>>()?;
        let xs: Vec<Array2<f64>> = acts
            .iter()
            .zip(self.norms)
            .map(|(a, n)| a.select(Axis(0), &positions) / n.scale)
            .collect();
        let f = self.params.encode_batch(&xs)?;
        Ok(Prepared { acts, positions, f, spec })
    }

    /// Mid-layer activations of source `c` with features replaced by `f_new`
    /// at the patched positions, reconstruction error frozen.
    pub fn patched(&self, prep: &Prepared, c: usize, f_new: &Array2<f64>) -> Array2<f64> {
        let s = self.norms[c].scale;
        let delta = (f_new - &prep.f).dot(&self.params.w_dec[c]) * s;
        let mut a = prep.acts[c].clone();
        for (k, &p) in prep.positions.iter().enumerate() {
            let mut row = a.row_mut(p);
            row += &delta.row(k);
        }
        a
    }

    fn scale(&self, prep: &Prepared, cfg: &IGConfig) -> f64 {
        match cfg.aggregate {
            PositionAggregate::Sum => 1.0,
            PositionAggregate::Mean => 1.0 / prep.positions.len() as f64,
        }
    }

    /// Exact zero-ablation effect of every feature on one pair for source
    /// `c`. Features inactive on the pair get exactly 0.
    pub fn ie_exact_all(&self, c: usize, pair: &MinimalPair, cfg: &IGConfig) -> Result<Array1<f64>> {
        let prep = self.prepare(pair, cfg.positions)?;
        let m0 = self.models[c].metric(prep.acts[c].view(), &prep.spec)?;
        let scale = self.scale(&prep, cfg);
        let mut out = Array1::zeros(self.params.dict_size());
        for i in 0..self.params.dict_size() {
            if prep.f.column(i).iter().all(|&v| v == 0.0) {
                continue;
            }
            out[i] = (self.ablate_one(&prep, c, i)? - m0) * scale;
        }
        Ok(out)
    }

    /// `m(x | do(f_i = 0)) − m(x)` for one feature.
    pub fn ie_exact(&self, c: usize, pair: &MinimalPair, feature: usize, cfg: &IGConfig) -> Result<f64> {
        let prep = self.prepare(pair, cfg.positions)?;
        if prep.f.column(feature).iter().all(|&v| v == 0.0) {
            return Ok(0.0);
        }
        let m0 = self.models[c].metric(prep.acts[c].view(), &prep.spec)?;
        Ok((self.ablate_one(&prep, c, feature)? - m0) * self.scale(&prep, cfg))
    }

    fn ablate_one(&self, prep: &Prepared, c: usize, i: usize) -> Result<f64> {
        let s = self.norms[c].scale;
        let dir = self.params.w_dec[c].row(i);
        let mut a = prep.acts[c].clone();
        for (k, &p) in prep.positions.iter().enumerate() {
            let fi = prep.f[[k, i]];
            if fi != 0.0 {
                a.row_mut(p).scaled_add(-s * fi, &dir);
            }
        }
        self.models[c].metric(a.view(), &prep.spec)
    }

    /// Integrated-gradients estimate for every feature on one pair, before
    /// thresholding, along `cfg.path` with
    /// `α ∈ {0, 1/N, …, (N−1)/N}` measured from the clean point.
    pub fn ie_ig_example(&self, c: usize, pair: &MinimalPair, cfg: &IGConfig) -> Result<Array1<f64>> {
        cfg.validate()?;
        let prep = self.prepare(pair, cfg.positions)?;
        let ie = match cfg.path {
            IgPath::Joint => self.joint_path(&prep, c, cfg.n_steps)?,
            IgPath::PerFeature => {
                let active: Vec<usize> = (0..self.params.dict_size())
                    .filter(|&i| prep.f.column(i).iter().any(|&v| v != 0.0))
                    .collect();
                let vals = self.feature_paths(&prep, c, &active, cfg.n_steps)?;
                let mut ie = Array1::zeros(self.params.dict_size());
                for (&i, v) in active.iter().zip(vals) {
                    ie[i] = v;
                }
                ie
            }
        };
        Ok(ie * self.scale(&prep, cfg))
    }

    /// `∇_a m` at the clean point projected onto every decoder direction,
    /// `|P| × D`.
    fn clean_projection(&self, prep: &Prepared, c: usize) -> Result<Array2<f64>> {
        let (_, g) = self.models[c].metric_grad(prep.acts[c].view(), &prep.spec)?;
        Ok(g.select(Axis(0), &prep.positions).dot(&self.params.w_dec[c].t()))
    }

    // (a_patch − a)·ḡ with a_patch − a = −s_c f[p,i] W_dec^c[i] per position.
    fn joint_path(&self, prep: &Prepared, c: usize, n: usize) -> Result<Array1<f64>> {
        let inputs: Vec<Array2<f64>> = (0..n)
            .map(|k| self.patched(prep, c, &(&prep.f * (1.0 - k as f64 / n as f64))))
            .collect();
        let views: Vec<ArrayView2<f64>> = inputs.iter().map(|a| a.view()).collect();
        let mut gbar = Array2::<f64>::zeros((prep.positions.len(), self.params.d_model()));
        for (_, g) in self.models[c].metric_grad_batch(&views, &prep.spec)? {
            gbar += &g.select(Axis(0), &prep.positions);
        }
        gbar /= n as f64;
        let proj = gbar.dot(&self.params.w_dec[c].t());
        Ok((&prep.f * &proj).sum_axis(Axis(0)) * -self.norms[c].scale)
    }

    /// Per-feature path sums for `features`; the interior points of every
    /// path are stacked into shared gradient evaluations.
    fn feature_paths(&self, prep: &Prepared, c: usize, features: &[usize], n: usize) -> Result<Vec<f64>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let s = self.norms[c].scale;
        let proj0 = self.clean_projection(prep, c)?;
        let mut total: Vec<f64> = features
            .iter()
            .map(|&i| prep.f.column(i).iter().zip(proj0.column(i)).map(|(f, g)| f * g).sum())
            .collect();
        let jobs: Vec<(usize, usize)> = (0..features.len()).flat_map(|j| (1..n).map(move |k| (j, k))).collect();
        let per_batch = (PATH_BATCH_ROWS / prep.acts[c].nrows()).max(1);
        for chunk in jobs.chunks(per_batch) {
            let inputs: Vec<Array2<f64>> = chunk
                .iter()
                .map(|&(j, k)| {
                    let i = features[j];
                    let alpha = k as f64 / n as f64;
                    let mut a = prep.acts[c].clone();
                    for (kk, &p) in prep.positions.iter().enumerate() {
                        let fi = prep.f[[kk, i]];
                        if fi != 0.0 {
                            a.row_mut(p).scaled_add(-alpha * s * fi, &self.params.w_dec[c].row(i));
                        }
                    }
                    a
                })
                .collect();
            let views: Vec<ArrayView2<f64>> = inputs.iter().map(|a| a.view()).collect();
            let grads = self.models[c].metric_grad_batch(&views, &prep.spec)?;
            for (&(j, _), (_, g)) in chunk.iter().zip(&grads) {
                let i = features[j];
                let dir = self.params.w_dec[c].row(i);
                for (kk, &p) in prep.positions.iter().enumerate() {
                    let fi = prep.f[[kk, i]];
                    if fi != 0.0 {
                        total[j] += fi * g.row(p).dot(&dir);
                    }
                }
            }
        }
        Ok(total.into_iter().map(|t| -s * t / n as f64).collect())
    }

    /// Per-feature-path estimate for a single feature with its own step
    /// count; equals the matching entry of [`Self::ie_ig_example`] under
    /// `IgPath::PerFeature`.
    pub fn ie_ig_isolated(&self, c: usize, pair: &MinimalPair, feature: usize, n_steps: usize, cfg: &IGConfig) -> Result<f64> {
        if n_steps == 0 {
            return Err(Error::Config("n_steps must be at least 1".into()));
        }
        let prep = self.prepare(pair, cfg.positions)?;
        if prep.f.column(feature).iter().all(|&v| v == 0.0) {
            return Ok(0.0);
        }
        Ok(self.feature_paths(&prep, c, &[feature], n_steps)?[0] * self.scale(&prep, cfg))
    }

    /// Batch-averaged, thresholded integrated-gradients IE for source `c`.
    pub fn ie_ig(&self, c: usize, pairs: &[MinimalPair], cfg: &IGConfig) -> Result<Array1<f64>> {
        let raw = self.ie_ig_raw(c, pairs, cfg)?;
        Ok(threshold(raw, cfg.threshold))
    }

    /// Batch-averaged integrated-gradients IE before thresholding.
    pub fn ie_ig_raw(&self, c: usize, pairs: &[MinimalPair], cfg: &IGConfig) -> Result<Array1<f64>> {
        if pairs.is_empty() {
            return Err(Error::Input("no minimal pairs to attribute".into()));
        }
        let mut acc = Array1::zeros(self.params.dict_size());
        for p in pairs {
            acc += &self.ie_ig_example(c, p, cfg)?;
        }
        Ok(acc / pairs.len() as f64)
    }

    /// Batch-averaged exact IE for source `c` (not thresholded).
    pub fn ie_exact_mean(&self, c: usize, pairs: &[MinimalPair], cfg: &IGConfig) -> Result<Array1<f64>> {
        if pairs.is_empty() {
            return Err(Error::Input("no minimal pairs to attribute".into()));
        }
        let mut acc = Array1::zeros(self.params.dict_size());
        for p in pairs {
            acc += &self.ie_exact_all(c, p, cfg)?;
        }
        Ok(acc / pairs.len() as f64)
    }
}

/// Zeroes every entry with magnitude below `t`.
pub fn threshold(mut v: Array1<f64>, t: f64) -> Array1<f64> {
    v.mapv_inplace(|x| if x.abs() < t { 0.0 } else { x });
    v
}

/// Per-feature attribution of one crosscoder on one task slice.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionTable {
    pub crosscoder: String,
    pub slice: String,
    pub sources: Vec<String>,
    pub n_examples: usize,
    /// Thresholded, batch-averaged IG estimates, `ie[c][i]`.
    pub ie: Vec<Vec<f64>>,
    /// The same estimates before thresholding.
    pub ie_raw: Vec<Vec<f64>>,
    /// Batch-averaged exact zero-ablation IE, when computed.
    pub ie_exact: Option<Vec<Vec<f64>>>,
    /// Decoder norms `‖W_dec^c[i]‖`.
    pub dec_norms: Vec<Vec<f64>>,
}

pub fn attribute(
    ctx: &AttributionContext,
    pairs: &[MinimalPair],
    cfg: &IGConfig,
    crosscoder_id: &str,
    slice: &str,
    with_exact: bool,
) -> Result<AttributionTable> {
    cfg.validate()?;
    let n = ctx.n_sources();
    let ie_raw: Vec<Vec<f64>> = (0..n).map(|c| ctx.ie_ig_raw(c, pairs, cfg).map(|v| v.to_vec())).collect::<Result<_>>()?;
    let ie = ie_raw.iter().map(|v| threshold(Array1::from(v.clone()), cfg.threshold).to_vec()).collect();
    let ie_exact = if with_exact {
        Some((0..n).map(|c| ctx.ie_exact_mean(c, pairs, cfg).map(|v| v.to_vec())).collect::<Result<_>>()?)
    } else {
        None
    };
    Ok(AttributionTable {
        crosscoder: crosscoder_id.to_string(),
        slice: slice.to_string(),
        sources: ctx.params.sources.clone(),
        n_examples: pairs.len(),
        ie,
        ie_raw,
        ie_exact,
        dec_norms: (0..n).map(|c| ctx.params.dec_norms(c).to_vec()).collect(),
    })
}

/// One table per distinct slice label (in order of first appearance) and a
/// final table over every pair labelled `all_label`. Each pair is attributed
/// once; thresholding follows the per-table batch average.
pub fn attribute_slices(
    ctx: &AttributionContext,
    pairs: &[MinimalPair],
    cfg: &IGConfig,
    crosscoder_id: &str,
    all_label: &str,
    with_exact: bool,
) -> Result<Vec<AttributionTable>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Input("no minimal pairs to attribute".into()));
    }
    let n = ctx.n_sources();
    let dsz = ctx.params.dict_size();
    let mut labels: Vec<String> = Vec::new();
    for p in pairs {
        if !labels.contains(&p.slice) {
            labels.push(p.slice.clone());
        }
    }
    labels.push(all_label.to_string());
    let all = labels.len() - 1;
    let zero = || vec![Array1::<f64>::zeros(dsz); n];
    let mut ig = vec![zero(); labels.len()];
    let mut ex = vec![zero(); labels.len()];
    let mut counts = vec![0usize; labels.len()];
    for p in pairs {
        let k = labels.iter().position(|l| *l == p.slice).expect("label collected");
        counts[k] += 1;
        counts[all] += 1;
        for c in 0..n {
            let v = ctx.ie_ig_example(c, p, cfg)?;
            ig[k][c] += &v;
            ig[all][c] += &v;
            if with_exact {
                let e = ctx.ie_exact_all(c, p, cfg)?;
                ex[k][c] += &e;
                ex[all][c] += &e;
            }
        }
    }
    let dec_norms: Vec<Vec<f64>> = (0..n).map(|c| ctx.params.dec_norms(c).to_vec()).collect();
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(k, slice)| {
            let m = counts[k] as f64;
            AttributionTable {
                crosscoder: crosscoder_id.to_string(),
                slice,
                sources: ctx.params.sources.clone(),
                n_examples: counts[k],
                ie: ig[k].iter().map(|v| threshold(v / m, cfg.threshold).to_vec()).collect(),
                ie_raw: ig[k].iter().map(|v| (v / m).to_vec()).collect(),
                ie_exact: with_exact.then(|| ex[k].iter().map(|v| (v / m).to_vec()).collect()),
                dec_norms: dec_norms.clone(),
            }
        })
        .collect())
}

/// `‖W2[i]‖ / (‖W1[i]‖ + ‖W2[i]‖)`; `None` when both norms are zero.
pub fn reldec_from_norms(n1: f64, n2: f64) -> Option<f64> {
    let den = n1 + n2;
    (den > 0.0).then(|| n2 / den)
}

pub fn reldec(params: &CrosscoderParams, c1: usize, c2: usize, feature: usize) -> Option<f64> {
    let n1 = params.w_dec[c1].row(feature).dot(&params.w_dec[c1].row(feature)).sqrt();
    let n2 = params.w_dec[c2].row(feature).dot(&params.w_dec[c2].row(feature)).sqrt();
    reldec_from_norms(n1, n2)
}

/// `|IE2| / (|IE1| + |IE2|)`; `None` (no effect) when both are zero.
pub fn relie2_values(ie1: f64, ie2: f64) -> Option<f64> {
    let den = ie1.abs() + ie2.abs();
    (den > 0.0).then(|| ie2.abs() / den)
}

/// `|IE_c| / Σ |IE|`; `None` (no effect) when all are zero.
pub fn relie3_values(ie: [f64; 3]) -> Option<[f64; 3]> {
    let den: f64 = ie.iter().map(|v| v.abs()).sum();
    (den > 0.0).then(|| ie.map(|v| v.abs() / den))
}

impl AttributionTable {
    pub fn dict_size(&self) -> usize {
        self.dec_norms.first().map_or(0, |v| v.len())
    }

    pub fn source_index(&self, source: &str) -> Result<usize> {
        self.sources
            .iter()
            .position(|s| s == source)
            .ok_or_else(|| Error::Input(format!("table has no source {source}")))
    }

    pub fn reldec(&self, c1: usize, c2: usize, feature: usize) -> Option<f64> {
        reldec_from_norms(self.dec_norms[c1][feature], self.dec_norms[c2][feature])
    }

    pub fn relie2(&self, c1: usize, c2: usize, feature: usize) -> Option<f64> {
        relie2_values(self.ie[c1][feature], self.ie[c2][feature])
    }

    pub fn relie3(&self, feature: usize) -> Result<Option<[f64; 3]>> {
        if self.ie.len() != 3 {
            return Err(Error::Input(format!("relie3 needs 3 sources, table has {}", self.ie.len())));
        }
        Ok(relie3_values([self.ie[0][feature], self.ie[1][feature], self.ie[2][feature]]))
    }

    /// Features with non-zero IE for source `c`, by `|IE|` descending and
    /// then ascending id, at most `k`.
    pub fn top_k(&self, c: usize, k: usize) -> Vec<usize> {
        top_k_by_abs(&self.ie[c], k)
    }

    pub fn to_tsv(&self) -> String {
        let n = self.sources.len();
        let mut s = format!(
            "# crosscoder={}\tslice={}\tsources={}\tn_examples={}\n",
            self.crosscoder,
            self.slice,
            self.sources.join(","),
            self.n_examples
        );
        let mut cols = vec!["feature_id".to_string()];
        cols.extend(self.sources.iter().map(|x| format!("ie_{x}")));
        if n >= 2 {
            cols.push("reldec".into());
        }
        match n {
            2 => cols.push("relie2".into()),
            3 => cols.extend(["relie3_1", "relie3_2", "relie3_3"].map(String::from)),
            _ => {}
        }
        cols.push("flags".into());
        cols.extend(self.sources.iter().map(|x| format!("ie_raw_{x}")));
        if self.ie_exact.is_some() {
            cols.extend(self.sources.iter().map(|x| format!("ie_exact_{x}")));
        }
        cols.extend(self.sources.iter().map(|x| format!("dec_norm_{x}")));
        s.push_str(&cols.join("\t"));
        s.push('\n');
        let tops: Vec<Vec<usize>> = (0..n).map(|c| self.top_k(c, 10)).collect();
        let opt = |v: Option<f64>| v.map_or("na".to_string(), fmt_f64);
        for i in 0..self.dict_size() {
            let mut row = vec![i.to_string()];
            row.extend((0..n).map(|c| fmt_f64(self.ie[c][i])));
            if n >= 2 {
                row.push(opt(self.reldec(0, n - 1, i)));
            }
            let mut flags = Vec::new();
            match n {
                2 => {
                    let r = self.relie2(0, 1, i);
                    if r.is_none() {
                        flags.push("no_effect".to_string());
                    }
                    row.push(opt(r));
                }
                3 => {
                    let r = self.relie3(i).expect("three sources");
                    if r.is_none() {
                        flags.push("no_effect".to_string());
                    }
                    for k in 0..3 {
                        row.push(opt(r.map(|v| v[k])));
                    }
                }
                _ => {}
            }
            for c in 0..n {
                if tops[c].contains(&i) {
                    flags.push(format!("top10_{}", self.sources[c]));
                }
            }
            row.push(if flags.is_empty() { "-".into() } else { flags.join(",") });
            row.extend((0..n).map(|c| fmt_f64(self.ie_raw[c][i])));
            if let Some(ex) = &self.ie_exact {
                row.extend((0..n).map(|c| fmt_f64(ex[c][i])));
            }
            row.extend((0..n).map(|c| fmt_f64(self.dec_norms[c][i])));
            s.push_str(&row.join("\t"));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_tsv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let meta = lines
            .next()
            .and_then(|l| l.strip_prefix("# "))
            .ok_or_else(|| Error::format(path, "missing metadata line"))?;
        let get = |key: &str| -> Result<String> {
            meta.split('\t')
                .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .map(str::to_string)
                .ok_or_else(|| Error::format(path, format!("metadata lacks {key}")))
        };
        let crosscoder = get("crosscoder")?;
        let slice = get("slice")?;
        let sources: Vec<String> = get("sources")?.split(',').map(str::to_string).collect();
        let n_examples = get("n_examples")?
            .parse()
            .map_err(|_| Error::format(path, "bad n_examples"))?;
        let cols: Vec<&str> = lines.next().ok_or_else(|| Error::format(path, "missing column header"))?.split('\t').collect();
        let col = |name: String| -> Result<usize> {
            cols.iter()
                .position(|c| *c == name)
                .ok_or_else(|| Error::format(path, format!("missing column {name}")))
        };
        let ie_cols = sources.iter().map(|s| col(format!("ie_{s}"))).collect::<Result<Vec<_>>>()?;
        let raw_cols = sources.iter().map(|s| col(format!("ie_raw_{s}"))).collect::<Result<Vec<_>>>()?;
        let norm_cols = sources.iter().map(|s| col(format!("dec_norm_{s}"))).collect::<Result<Vec<_>>>()?;
        let exact_cols: Option<Vec<usize>> = sources.iter().map(|s| col(format!("ie_exact_{s}")).ok()).collect();
        let n = sources.len();
        let mut ie = vec![Vec::new(); n];
        let mut ie_raw = vec![Vec::new(); n];
        let mut dec_norms = vec![Vec::new(); n];
        let mut exact = vec![Vec::new(); n];
        for (ln, line) in lines.enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            let num = |k: usize| -> Result<f64> {
                f.get(k).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| Error::Validation {
                    path: path.to_path_buf(),
                    line: ln + 3,
                    message: format!("column {} is not a number", cols.get(k).unwrap_or(&"?")),
                })
            };
            for c in 0..n {
                ie[c].push(num(ie_cols[c])?);
                ie_raw[c].push(num(raw_cols[c])?);
                dec_norms[c].push(num(norm_cols[c])?);
                if let Some(ec) = &exact_cols {
                    exact[c].push(num(ec[c])?);
                }
            }
        }
        Ok(AttributionTable {
            crosscoder,
            slice,
            sources,
            n_examples,
            ie,
            ie_raw,
            ie_exact: exact_cols.map(|_| exact),
            dec_norms,
        })
    }
}

/// Indices of non-zero entries by magnitude descending, ties by index.
pub fn top_k_by_abs(v: &[f64], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..v.len()).filter(|&i| v[i] != 0.0).collect();
    ids.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}
