//! Checkpoint selection, ablation validation, feature overlap, top
//! activating sequences and plain-text report exports.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionContext, AttributionTable, IGConfig, PositionAggregate};
use crate::corpus::{MinimalPair, Vocab};
use crate::dictcore::CrosscoderParams;
use crate::actstore::NormStats;
use crate::toylm::Checkpoint;
use crate::util::{fmt_f64, write_atomic};
use crate::{Error, Result};

/// Label used for the all-pairs group in accuracy curves.
pub const ALL_TASKS: &str = "all";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPoint {
    pub checkpoint: String,
    pub tokens_seen: u64,
    pub task: String,
    pub accuracy: f64,
    pub n: usize,
}

/// Credit for one pair: 1 if `log p(correct) > log p(wrong)`, 0 if lower,
/// and 1/2 on an exact tie.
pub fn pair_credit(ckpt: &Checkpoint, pair: &MinimalPair, bos: u32) -> Result<f64> {
    let tokens = pair.model_input(bos);
    let lp = ckpt.forward_logits(&tokens)?;
    let last = lp.row(tokens.len() - 1);
    let (c, w) = (last[pair.correct as usize], last[pair.wrong as usize]);
    Ok(match c.partial_cmp(&w) {
        Some(Ordering::Greater) => 1.0,
        Some(Ordering::Less) => 0.0,
        _ => 0.5,
    })
}

/// Accuracy of every checkpoint on `pairs`, per subtask tag and overall.
pub fn accuracy_curve(ckpts: &[&Checkpoint], pairs: &[MinimalPair], bos: u32) -> Result<Vec<AccuracyPoint>> {
    if pairs.is_empty() {
        return Err(Error::Input("accuracy needs at least one minimal pair".into()));
    }
    let mut tasks: Vec<&str> = Vec::new();
    for p in pairs {
        if !tasks.contains(&p.subtask.as_str()) {
            tasks.push(&p.subtask);
        }
    }
    let mut out = Vec::new();
    for ck in ckpts {
        let credits: Vec<f64> = pairs.iter().map(|p| pair_credit(ck, p, bos)).collect::<Result<_>>()?;
        let mut push = |task: &str, sel: &dyn Fn(&MinimalPair) -> bool| {
            let (sum, n) = pairs
                .iter()
                .zip(&credits)
                .filter(|(p, _)| sel(p))
                .fold((0.0, 0), |(s, n), (_, c)| (s + c, n + 1));
            out.push(AccuracyPoint {
                checkpoint: ck.id.clone(),
                tokens_seen: ck.tokens_seen,
                task: task.to_string(),
                accuracy: sum / n as f64,
                n,
            });
        };
        push(ALL_TASKS, &|_| true);
        if tasks.len() > 1 {
            for t in &tasks {
                push(t, &|p| p.subtask == *t);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityPosition {
    /// Last prefix token.
    FinalToken,
    /// Average over all prefix positions after BOS.
    MeanOverPositions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityMeasure {
    Cosine,
    Pearson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub ids: Vec<String>,
    pub values: Vec<Vec<f64>>,
    /// (example, position) items skipped because a vector had zero norm.
    pub skipped: usize,
}

fn similarity(a: ArrayView1<f64>, b: ArrayView1<f64>, measure: SimilarityMeasure) -> Option<f64> {
    let (a, b) = match measure {
        SimilarityMeasure::Cosine => (a.to_owned(), b.to_owned()),
        SimilarityMeasure::Pearson => {
            let ma = a.mean().unwrap_or(0.0);
            let mb = b.mean().unwrap_or(0.0);
            (a.mapv(|v| v - ma), b.mapv(|v| v - mb))
        }
    };
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    (na > 0.0 && nb > 0.0).then(|| (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean similarity of mid-layer activations between every pair of
/// checkpoints over the prefixes of `pairs`.
pub fn similarity_matrix(
    ckpts: &[&Checkpoint],
    pairs: &[MinimalPair],
    bos: u32,
    position: SimilarityPosition,
    measure: SimilarityMeasure,
) -> Result<SimilarityMatrix> {
    let n = ckpts.len();
    if n < 2 {
        return Err(Error::Input("similarity needs at least two checkpoints".into()));
    }
    let mut sum = vec![vec![0.0; n]; n];
    let mut count = vec![vec![0usize; n]; n];
    let mut skipped = 0;
    for p in pairs {
        let tokens = p.model_input(bos);
        let acts: Vec<Array2<f64>> = ckpts.iter().map(|c| c.capture_midlayer(&tokens)).collect::<Result<_>>()?;
        let positions: Vec<usize> = match position {
            SimilarityPosition::FinalToken => vec![tokens.len() - 1],
            SimilarityPosition::MeanOverPositions => (1..tokens.len()).collect(),
        };
        for &pos in &positions {
            if acts.iter().any(|a| similarity(a.row(pos), a.row(pos), measure).is_none()) {
                skipped += 1;
                continue;
            }
            for i in 0..n {
                for j in i..n {
                    let s = if i == j { 1.0 } else { similarity(acts[i].row(pos), acts[j].row(pos), measure).unwrap() };
                    sum[i][j] += s;
                    count[i][j] += 1;
                }
            }
        }
    }
    let mut values = vec![vec![f64::NAN; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = if count[i][j] > 0 { sum[i][j] / count[i][j] as f64 } else { f64::NAN };
            values[i][j] = v;
            values[j][i] = v;
        }
    }
    Ok(SimilarityMatrix {
        ids: ckpts.iter().map(|c| c.id.clone()).collect(),
        values,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub index: usize,
    pub checkpoint: String,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    pub accuracy: Vec<AccuracyPoint>,
    pub similarity: SimilarityMatrix,
    pub suggested: Vec<Suggestion>,
}

/// Advisory checkpoint suggestions: local maxima (at least `tau`) of the
/// accuracy gain over the previous `w` checkpoints, plus the checkpoint that
/// opens the largest drop in adjacent-checkpoint similarity when that
/// similarity varies by at least `tau`.
pub fn suggest_transitions(
    ids: &[String],
    accuracy: &[f64],
    similarity: Option<&SimilarityMatrix>,
    w: usize,
    tau: f64,
) -> Result<Vec<Suggestion>> {
    let n = accuracy.len();
    if n < 3 || ids.len() != n {
        return Err(Error::Input("suggestions need at least 3 checkpoints with ids".into()));
    }
    if w == 0 {
        return Err(Error::Config("window must be at least 1".into()));
    }
    let delta: Vec<f64> = (0..n).map(|i| if i >= w { accuracy[i] - accuracy[i - w] } else { f64::NEG_INFINITY }).collect();
    let mut out: Vec<Suggestion> = Vec::new();
    for i in w..n {
        let left = if i > w { delta[i - 1] } else { f64::NEG_INFINITY };
        let right = if i + 1 < n { delta[i + 1] } else { f64::NEG_INFINITY };
        if delta[i] >= tau && delta[i] > left && delta[i] >= right {
            out.push(Suggestion {
                index: i,
                checkpoint: ids[i].clone(),
                rationale: format!(
                    "accuracy rises by {:.3} over the previous {w} checkpoint(s) ({:.3} -> {:.3})",
                    delta[i],
                    accuracy[i - w],
                    accuracy[i]
                ),
            });
        }
    }
    if let Some(sim) = similarity {
        if sim.ids.len() == n {
            let adj: Vec<f64> = (1..n).map(|i| sim.values[i - 1][i]).collect();
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            let mut arg = 0;
            for (k, &v) in adj.iter().enumerate() {
                if v < lo {
                    lo = v;
                    arg = k + 1;
                }
                hi = hi.max(v);
            }
            if hi - lo >= tau && !out.iter().any(|s| s.index == arg) {
                out.push(Suggestion {
                    index: arg,
                    checkpoint: ids[arg].clone(),
                    rationale: format!(
                        "largest similarity drop between adjacent checkpoints ({:.3}, range {:.3}..{:.3})",
                        lo, lo, hi
                    ),
                });
            }
        }
    }
    out.sort_by_key(|s| s.index);
    Ok(out)
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's ρ with average ranks; `None` if either input is constant or
/// the inputs are shorter than 2.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub feature: usize,
    /// Change in task-mean `m` after ablation, per source.
    pub delta: [f64; 2],
    pub ratio: f64,
    pub reldec: Option<f64>,
    pub relie: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationValidation {
    pub rows: Vec<AblationRow>,
    pub spearman_reldec: f64,
    pub spearman_relie: f64,
    pub n_used: usize,
}

/// Hard-ablates each feature in the union of both sources' top-`k` and
/// correlates `|Δc2| / |Δc1|` with RelDec and RelIE over usable features
/// (finite or infinite ratio, both scores defined).
pub fn ablation_validation(
    ctx: &AttributionContext,
    pairs: &[MinimalPair],
    table: &AttributionTable,
    k: usize,
    cfg: &IGConfig,
) -> Result<AblationValidation> {
    if ctx.n_sources() != 2 || table.sources != ctx.params.sources {
        return Err(Error::Input("ablation validation needs the two-source crosscoder the table was built from".into()));
    }
    if pairs.is_empty() {
        return Err(Error::Input("no minimal pairs".into()));
    }
    let mut features = table.top_k(0, k);
    for f in table.top_k(1, k) {
        if !features.contains(&f) {
            features.push(f);
        }
    }
    features.sort_unstable();
    let sum_cfg = IGConfig { aggregate: PositionAggregate::Sum, ..cfg.clone() };
    let mut deltas = vec![[0.0f64; 2]; features.len()];
    for p in pairs {
        let prep = ctx.prepare(p, sum_cfg.positions)?;
        for c in 0..2 {
            let m0 = ctx.models[c].metric(prep.acts[c].view(), &prep.spec)?;
            for (k, &i) in features.iter().enumerate() {
                if prep.f.column(i).iter().all(|&v| v == 0.0) {
                    continue;
                }
                let mut f_new = prep.f.clone();
                f_new.column_mut(i).fill(0.0);
                let a = ctx.patched(&prep, c, &f_new);
                deltas[k][c] += ctx.models[c].metric(a.view(), &prep.spec)? - m0;
            }
        }
    }
    let rows: Vec<AblationRow> = features
        .iter()
        .zip(&deltas)
        .map(|(&i, d)| {
            let delta = [d[0] / pairs.len() as f64, d[1] / pairs.len() as f64];
            AblationRow {
                feature: i,
                delta,
                ratio: delta[1].abs() / delta[0].abs(),
                reldec: table.reldec(0, 1, i),
                relie: table.relie2(0, 1, i),
            }
        })
        .collect();
    let used: Vec<&AblationRow> = rows
        .iter()
        .filter(|r| !r.ratio.is_nan() && r.reldec.is_some() && r.relie.is_some())
        .collect();
    if used.len() < 3 {
        return Err(Error::Input(format!(
            "only {} usable features; correlation needs at least 3",
            used.len()
        )));
    }
    let ratio: Vec<f64> = used.iter().map(|r| r.ratio).collect();
    let rd: Vec<f64> = used.iter().map(|r| r.reldec.unwrap()).collect();
    let ri: Vec<f64> = used.iter().map(|r| r.relie.unwrap()).collect();
    let undefined = || Error::Undefined("constant ranks; Spearman correlation undefined".into());
    Ok(AblationValidation {
        spearman_reldec: spearman(&ratio, &rd).ok_or_else(undefined)?,
        spearman_relie: spearman(&ratio, &ri).ok_or_else(undefined)?,
        n_used: used.len(),
        rows,
    })
}

/// `|top-k(a) ∩ top-k(b)|` for every pair of slice tables, for one source.
pub fn overlap_counts(tables: &[&AttributionTable], source: &str, k: usize) -> Result<Vec<Vec<usize>>> {
    let tops: Vec<Vec<usize>> = tables
        .iter()
        .map(|t| {
            if t.crosscoder != tables[0].crosscoder {
                return Err(Error::Input("overlap tables must share one crosscoder".into()));
            }
            Ok(t.top_k(t.source_index(source)?, k))
        })
        .collect::<Result<_>>()?;
    Ok(tops
        .iter()
        .map(|a| tops.iter().map(|b| a.iter().filter(|x| b.contains(x)).count()).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopSequence {
    pub sequence_index: usize,
    pub tokens: Vec<u32>,
    /// Feature activation per token; 0 at skipped positions.
    pub acts: Vec<f64>,
    pub max: f64,
    pub argmax: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopActivations {
    pub features: Vec<usize>,
    pub sequences: Vec<Vec<TopSequence>>,
}

struct HeapItem(f64, usize, TopSequence);

impl PartialEq for HeapItem {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapItem {}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapItem {
    /// "Greater" is worse: smaller max, then later sequence, so the heap top
    /// is the entry to evict.
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(self.1.cmp(&other.1))
    }
}

/// Exact top-`m` sequences per feature by maximum token activation, ties
/// broken by lower sequence index. Features never active yield empty lists.
/// Activations need every source, so `ckpts` are the crosscoder's sources in
/// order.
pub fn top_activating_sequences(
    params: &CrosscoderParams,
    norms: &[NormStats],
    ckpts: &[&Checkpoint],
    sequences: &[Vec<u32>],
    skip: &[u32],
    features: &[usize],
    m: usize,
) -> Result<TopActivations> {
    if sequences.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    if ckpts.len() != params.n_sources() || norms.len() != params.n_sources() {
        return Err(Error::Input("one checkpoint and norm record per source required".into()));
    }
    if let Some(&f) = features.iter().find(|&&f| f >= params.dict_size()) {
        return Err(Error::Input(format!("feature {f} outside dictionary of {}", params.dict_size())));
    }
    let mut heaps: Vec<BinaryHeap<HeapItem>> = features.iter().map(|_| BinaryHeap::new()).collect();
    let cols: Vec<usize> = features.to_vec();
    for (q, seq) in sequences.iter().enumerate() {
        let keep: Vec<usize> = (0..seq.len()).filter(|&p| !skip.contains(&seq[p])).collect();
        if keep.is_empty() {
            continue;
        }
        let xs: Vec<Array2<f64>> = ckpts
            .iter()
            .zip(norms)
            .map(|(c, n)| c.capture_midlayer(seq).map(|a| a.select(Axis(0), &keep) / n.scale))
            .collect::<Result<_>>()?;
        let f = params.encode_batch(&xs)?.select(Axis(1), &cols);
        for (k, heap) in heaps.iter_mut().enumerate() {
            let col = f.column(k);
            let (mut best, mut arg) = (0.0, 0);
            for (r, &v) in col.iter().enumerate() {
                if v > best {
                    best = v;
                    arg = keep[r];
                }
            }
            if best <= 0.0 {
                continue;
            }
            if heap.len() == m {
                let worst = heap.peek().unwrap();
                if best <= worst.0 {
                    continue;
                }
            }
            let mut acts = vec![0.0; seq.len()];
            for (r, &p) in keep.iter().enumerate() {
                acts[p] = col[r];
            }
            heap.push(HeapItem(best, q, TopSequence { sequence_index: q, tokens: seq.clone(), acts, max: best, argmax: arg }));
            if heap.len() > m {
                heap.pop();
            }
        }
    }
    Ok(TopActivations {
        features: features.to_vec(),
        sequences: heaps
            .into_iter()
            .map(|h| h.into_sorted_vec().into_iter().map(|it| it.2).collect())
            .collect(),
    })
}

/// The four annotation questions asked per feature.
pub const ANNOTATION_QUESTIONS: [(&str, &str); 4] = [
    ("description", "Describe in a few words what this feature responds to."),
    ("interpretability", "How interpretable is this feature? (1 = not at all, 5 = fully)"),
    ("complexity", "How complex is the pattern? (1 = a single token, 5 = abstract structure)"),
    ("languages", "Which languages do the activating sequences belong to?"),
];

/// Ternary coordinates (`relie3`) for every defined feature.
pub fn export_ternary(table: &AttributionTable, k: usize, path: &Path) -> Result<()> {
    if table.ie.len() != 3 {
        return Err(Error::Input(format!(
            "ternary export needs columns ie_c1, ie_c2, ie_c3; table has {} source column(s)",
            table.ie.len()
        )));
    }
    let tops: Vec<Vec<usize>> = (0..3).map(|c| table.top_k(c, k)).collect();
    let mut s = String::from("feature_id\tr1\tr2\tr3\ttopk_flags\n");
    for i in 0..table.dict_size() {
        if let Some(r) = table.relie3(i)? {
            let flags: Vec<&str> = (0..3).filter(|&c| tops[c].contains(&i)).map(|c| table.sources[c].as_str()).collect();
            s.push_str(&format!(
                "{i}\t{}\t{}\t{}\t{}\n",
                fmt_f64(r[0]),
                fmt_f64(r[1]),
                fmt_f64(r[2]),
                if flags.is_empty() { "-".to_string() } else { flags.join(",") }
            ));
        }
    }
    write_atomic(path, s.as_bytes())
}

/// IE of selected features across the table's checkpoints: the `n` largest
/// and `n` smallest features by `|IE|` summed over sources.
pub fn export_ie_evolution(table: &AttributionTable, ckpt_tokens: &[u64], n: usize, path: &Path) -> Result<()> {
    if ckpt_tokens.len() != table.sources.len() {
        return Err(Error::Input("one token count per source required".into()));
    }
    let total: Vec<f64> = (0..table.dict_size())
        .map(|i| table.ie.iter().map(|v| v[i].abs()).sum())
        .collect();
    let mut live: Vec<usize> = (0..total.len()).filter(|&i| total[i] > 0.0).collect();
    live.sort_by(|&a, &b| total[b].total_cmp(&total[a]).then(a.cmp(&b)));
    let top: Vec<usize> = live.iter().take(n).copied().collect();
    let bottom: Vec<usize> = live.iter().rev().take(n).filter(|i| !top.contains(i)).copied().collect();
    let mut s = String::from("feature_id\tgroup\tcheckpoint\ttokens_seen\tie\n");
    for (group, ids) in [("top", &top), ("bottom", &bottom)] {
        for &i in ids {
            for (c, src) in table.sources.iter().enumerate() {
                s.push_str(&format!("{i}\t{group}\t{src}\t{}\t{}\n", ckpt_tokens[c], fmt_f64(table.ie[c][i])));
            }
        }
    }
    write_atomic(path, s.as_bytes())
}

pub fn export_heatmap(sim: &SimilarityMatrix, path: &Path) -> Result<()> {
    let mut s = String::from("ckpt_a\tckpt_b\tcosine\n");
    for (i, a) in sim.ids.iter().enumerate() {
        for (j, b) in sim.ids.iter().enumerate() {
            s.push_str(&format!("{a}\t{b}\t{}\n", fmt_f64(sim.values[i][j])));
        }
    }
    write_atomic(path, s.as_bytes())
}

pub fn export_accuracy(curve: &[AccuracyPoint], path: &Path) -> Result<()> {
    let mut s = String::from("checkpoint\ttokens_seen\ttask\taccuracy\tn\n");
    for p in curve {
        s.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", p.checkpoint, p.tokens_seen, p.task, fmt_f64(p.accuracy), p.n));
    }
    write_atomic(path, s.as_bytes())
}

/// Annotation worksheet: attribution scores, the four questions with blank
/// answers, and each top sequence rendered as `token:activation` pairs.
pub fn export_annotations(table: &AttributionTable, tops: &TopActivations, vocab: &Vocab, path: &Path) -> Result<()> {
    let n = table.sources.len();
    let mut s = String::from("feature_id\tkind\tkey\tvalue\n");
    for (k, &i) in tops.features.iter().enumerate() {
        for c in 0..n {
            s.push_str(&format!("{i}\tscore\tie_{}\t{}\n", table.sources[c], fmt_f64(table.ie[c][i])));
        }
        if n == 2 {
            let v = table.relie2(0, 1, i).map_or("na".into(), fmt_f64);
            s.push_str(&format!("{i}\tscore\trelie2\t{v}\n"));
        }
        if n == 3 {
            if let Some(r) = table.relie3(i)? {
                s.push_str(&format!("{i}\tscore\trelie3\t{},{},{}\n", fmt_f64(r[0]), fmt_f64(r[1]), fmt_f64(r[2])));
            }
        }
        for (key, prompt) in ANNOTATION_QUESTIONS {
            s.push_str(&format!("{i}\tquestion\t{key}\t{prompt}\n"));
        }
        for (rank, seq) in tops.sequences[k].iter().enumerate() {
            let rendered: Vec<String> = seq
                .tokens
                .iter()
                .zip(&seq.acts)
                .map(|(&t, &a)| format!("{}:{:.3}", vocab.token(t).unwrap_or("<?>"), a))
                .collect();
            s.push_str(&format!(
                "{i}\tsequence\t{rank}\tmax={:.4} at {} | {}\n",
                seq.max,
                seq.argmax,
                rendered.join(" ")
            ));
        }
    }
    write_atomic(path, s.as_bytes())
}
