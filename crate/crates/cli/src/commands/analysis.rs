use serde::Serialize;
use serde_json::json;
use xct_core::analysis::{
    ablation_validation, accuracy_curve, export_accuracy, export_annotations, export_heatmap, export_ie_evolution,
    export_ternary, overlap_counts, similarity_matrix, spearman, suggest_transitions, top_activating_sequences,
    AblationValidation, TransitionReport, ALL_TASKS,
};
use xct_core::attribution::{attribute_slices, top_k_by_abs, AttributionContext, AttributionTable, MidLayerModel};
use xct_core::corpus::Subtask;
use xct_core::dictcore::load_crosscoder;
use xct_core::util::fmt_f64;

use super::{
    attribution_file, checkpoint_file, checkpoint_meta_file, crosscoder_file, crosscoder_name, pairs_file, settings,
    Session, ALL_SLICE, EVAL_CORPUS, VOCAB_FILE,
};
use crate::error::{CliError, CliResult};
use crate::manifest::StepSpec;

/// The crosscoder the analysis commands use: the first seed's.
fn analysis_seed(s: &Session) -> u64 {
    s.config.seeds[0]
}

fn pair_inputs() -> Vec<String> {
    Subtask::ALL.into_iter().map(pairs_file).collect()
}

fn source_inputs(sources: &[String]) -> Vec<String> {
    sources.iter().flat_map(|id| [checkpoint_file(id), checkpoint_meta_file(id)]).collect()
}

/// Slice labels written by attribute: the subtasks, then the overall table.
fn slice_labels() -> Vec<String> {
    Subtask::ALL.into_iter().map(|t| t.name().to_string()).chain([ALL_SLICE.to_string()]).collect()
}

pub fn attribute(s: &Session) -> CliResult<()> {
    let sources = &s.config.crosscoder.sources;
    let name = crosscoder_name(sources);
    let seed = analysis_seed(s);
    let mut inputs = vec![VOCAB_FILE.to_string(), crosscoder_file(&name, seed)];
    inputs.extend(pair_inputs());
    inputs.extend(source_inputs(sources));
    let a = &s.config.attribution;
    let step = StepSpec {
        command: "attribute",
        key: Some(name.clone()),
        inputs,
        settings: json!({ "sources": sources, "ig": settings(&a.ig), "with_exact": a.with_exact }),
        seeds: vec![seed],
    };
    s.step(step, || {
        let vocab = s.vocab()?;
        let pairs = s.pairs()?;
        let (params, norms) = load_crosscoder(&s.path(&crosscoder_file(&name, seed)))?;
        let ckpts = s.checkpoints(sources)?;
        let models: Vec<&dyn MidLayerModel> = ckpts.iter().map(|c| c as &dyn MidLayerModel).collect();
        let ctx = AttributionContext::new(&params, &norms, models, vocab.bos())?;
        let id = format!("{name}.seed{seed}");
        let tables = attribute_slices(&ctx, &pairs, &a.ig, &id, ALL_SLICE, a.with_exact)?;
        let mut out = Vec::new();
        for t in &tables {
            out.push(s.write(&attribution_file(&name, seed, &t.slice), t.to_tsv().as_bytes())?);
        }
        Ok(out)
    })
}

#[derive(Debug, Serialize)]
struct OracleRow {
    source: String,
    n: usize,
    /// Spearman of the pre-threshold IG estimate against exact IE.
    spearman_raw: Option<f64>,
    /// The same with the thresholded estimate.
    spearman_thresholded: Option<f64>,
}

#[derive(Debug, Serialize)]
struct ValidationSummary {
    crosscoder: String,
    oracle_top: usize,
    oracle: Vec<OracleRow>,
    ablation: Option<AblationSummary>,
}

#[derive(Debug, Serialize)]
struct SliceAblation {
    slice: String,
    result: Option<AblationValidation>,
    /// Why the slice has no correlation, e.g. too few usable features.
    skipped: Option<String>,
}

/// Ablation study per subtask and over all pairs. The means run over the
/// subtasks only.
#[derive(Debug, Serialize)]
struct AblationSummary {
    mean_spearman_reldec: Option<f64>,
    mean_spearman_relie: Option<f64>,
    subtasks_used: usize,
    slices: Vec<SliceAblation>,
}

pub fn validate(s: &Session) -> CliResult<()> {
    let sources = &s.config.crosscoder.sources;
    let name = crosscoder_name(sources);
    let seed = analysis_seed(s);
    let table_file = attribution_file(&name, seed, ALL_SLICE);
    let mut inputs = vec![VOCAB_FILE.to_string(), crosscoder_file(&name, seed)];
    inputs.extend(slice_labels().iter().map(|l| attribution_file(&name, seed, l)));
    inputs.extend(pair_inputs());
    inputs.extend(source_inputs(sources));
    let an = &s.config.analysis;
    let step = StepSpec {
        command: "validate",
        key: Some(name.clone()),
        inputs,
        settings: json!({
            "ig": settings(&s.config.attribution.ig),
            "oracle_top": an.oracle_top,
            "ablation_k": an.ablation_k,
        }),
        seeds: vec![seed],
    };
    s.step(step, || {
        let table = AttributionTable::load(&s.path(&table_file))?;
        let exact = table.ie_exact.as_ref().ok_or_else(|| {
            CliError::Config(format!("{table_file} lacks exact IE; rerun attribute with attribution.with_exact = true"))
        })?;
        let mut oracle = Vec::new();
        let mut t = String::from("source\tn\tspearman_raw\tspearman_thresholded\n");
        for (c, src) in table.sources.iter().enumerate() {
            let top = top_k_by_abs(&exact[c], an.oracle_top);
            let pick = |v: &[f64]| top.iter().map(|&i| v[i]).collect::<Vec<f64>>();
            let ex = pick(&exact[c]);
            let row = OracleRow {
                source: src.clone(),
                n: top.len(),
                spearman_raw: spearman(&pick(&table.ie_raw[c]), &ex),
                spearman_thresholded: spearman(&pick(&table.ie[c]), &ex),
            };
            let f = |v: Option<f64>| v.map_or("na".to_string(), fmt_f64);
            t.push_str(&format!("{src}\t{}\t{}\t{}\n", row.n, f(row.spearman_raw), f(row.spearman_thresholded)));
            oracle.push(row);
        }
        let mut out = vec![s.write(&format!("validate/{name}/seed{seed}/oracle.tsv"), t.as_bytes())?];

        let ablation = if sources.len() == 2 {
            let vocab = s.vocab()?;
            let pairs = s.pairs()?;
            let (params, norms) = load_crosscoder(&s.path(&crosscoder_file(&name, seed)))?;
            let ckpts = s.checkpoints(sources)?;
            let models: Vec<&dyn MidLayerModel> = ckpts.iter().map(|c| c as &dyn MidLayerModel).collect();
            let ctx = AttributionContext::new(&params, &norms, models, vocab.bos())?;
            let opt = |v: Option<f64>| v.map_or("na".to_string(), fmt_f64);
            let mut t = String::from("slice\tfeature_id\tdelta_c1\tdelta_c2\tratio\treldec\trelie\n");
            let mut per_slice = Vec::new();
            for label in slice_labels() {
                let table = AttributionTable::load(&s.path(&attribution_file(&name, seed, &label)))?;
                let subset: Vec<_> = pairs.iter().filter(|p| label == ALL_SLICE || p.slice == label).cloned().collect();
                let result = ablation_validation(&ctx, &subset, &table, an.ablation_k, &s.config.attribution.ig);
                let av = match result {
                    Ok(av) => av,
                    Err(xct_core::Error::Input(reason)) => {
                        per_slice.push(SliceAblation { slice: label, result: None, skipped: Some(reason) });
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                };
                for r in &av.rows {
                    t.push_str(&format!(
                        "{label}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                        r.feature,
                        fmt_f64(r.delta[0]),
                        fmt_f64(r.delta[1]),
                        fmt_f64(r.ratio),
                        opt(r.reldec),
                        opt(r.relie)
                    ));
                }
                per_slice.push(SliceAblation { slice: label, result: Some(av), skipped: None });
            }
            out.push(s.write(&format!("validate/{name}/seed{seed}/ablation.tsv"), t.as_bytes())?);
            let subtasks: Vec<&AblationValidation> = per_slice
                .iter()
                .filter(|a| a.slice != ALL_SLICE)
                .filter_map(|a| a.result.as_ref())
                .collect();
            let k = subtasks.len() as f64;
            Some(AblationSummary {
                mean_spearman_reldec: (k > 0.0).then(|| subtasks.iter().map(|a| a.spearman_reldec).sum::<f64>() / k),
                mean_spearman_relie: (k > 0.0).then(|| subtasks.iter().map(|a| a.spearman_relie).sum::<f64>() / k),
                subtasks_used: subtasks.len(),
                slices: per_slice,
            })
        } else {
            None
        };
        let summary = ValidationSummary {
            crosscoder: table.crosscoder.clone(),
            oracle_top: an.oracle_top,
            oracle,
            ablation,
        };
        out.push(s.write_json(&format!("validate/{name}/seed{seed}/summary.json"), &summary)?);
        Ok(out)
    })
}

pub fn report(s: &Session) -> CliResult<()> {
    let sources = &s.config.crosscoder.sources;
    let name = crosscoder_name(sources);
    let seed = analysis_seed(s);
    let all_ids = s.config.checkpoint_ids();
    let mut inputs = vec![VOCAB_FILE.to_string(), EVAL_CORPUS.to_string(), crosscoder_file(&name, seed)];
    inputs.extend(pair_inputs());
    inputs.extend(source_inputs(&all_ids));
    inputs.extend(slice_labels().iter().map(|l| attribution_file(&name, seed, l)));
    let an = &s.config.analysis;
    let step = StepSpec {
        command: "report",
        key: Some(name.clone()),
        inputs,
        settings: json!({ "analysis": settings(an), "context_len": s.config.lm.context_len }),
        seeds: vec![seed],
    };
    s.step(step, || {
        let dir = format!("report/{name}");
        let rel = |f: &str| format!("{dir}/{f}");
        let vocab = s.vocab()?;
        let pairs = s.pairs()?;
        let mut out = Vec::new();

        let ckpts = s.checkpoints(&all_ids)?;
        let refs: Vec<_> = ckpts.iter().collect();
        let curve = accuracy_curve(&refs, &pairs, vocab.bos())?;
        export_accuracy(&curve, &s.path(&rel("accuracy.tsv")))?;
        out.push(rel("accuracy.tsv"));
        let sim = similarity_matrix(&refs, &pairs, vocab.bos(), an.similarity_position, an.similarity_measure)?;
        export_heatmap(&sim, &s.path(&rel("similarity.tsv")))?;
        out.push(rel("similarity.tsv"));
        let overall: Vec<f64> = all_ids
            .iter()
            .map(|id| {
                curve
                    .iter()
                    .find(|p| p.checkpoint == *id && p.task == ALL_TASKS)
                    .map(|p| p.accuracy)
                    .expect("accuracy per checkpoint")
            })
            .collect();
        let suggested = suggest_transitions(&all_ids, &overall, Some(&sim), an.window, an.tau)?;
        let mut t = String::from("index\tcheckpoint\trationale\n");
        for g in &suggested {
            t.push_str(&format!("{}\t{}\t{}\n", g.index, g.checkpoint, g.rationale));
        }
        out.push(s.write(&rel("transitions.tsv"), t.as_bytes())?);
        let transitions = TransitionReport { accuracy: curve, similarity: sim, suggested };
        out.push(s.write_json(&rel("transitions.json"), &transitions)?);

        let tables: Vec<AttributionTable> = slice_labels()
            .iter()
            .map(|l| AttributionTable::load(&s.path(&attribution_file(&name, seed, l))))
            .collect::<xct_core::Result<_>>()?;
        let slices: Vec<&AttributionTable> = tables.iter().filter(|t| t.slice != ALL_SLICE).collect();
        let all = tables.iter().find(|t| t.slice == ALL_SLICE).expect("overall table loaded");
        for src in sources {
            let counts = overlap_counts(&slices, src, an.top_k)?;
            let mut t = String::from("slice");
            for sl in &slices {
                t.push_str(&format!("\t{}", sl.slice));
            }
            t.push('\n');
            for (sl, row) in slices.iter().zip(&counts) {
                t.push_str(&sl.slice);
                for v in row {
                    t.push_str(&format!("\t{v}"));
                }
                t.push('\n');
            }
            out.push(s.write(&rel(&format!("overlap.{src}.tsv")), t.as_bytes())?);
        }
        if sources.len() == 3 {
            export_ternary(all, an.top_k, &s.path(&rel("ternary.tsv")))?;
            out.push(rel("ternary.tsv"));
        }
        let src_ckpts: Vec<_> = sources
            .iter()
            .map(|id| ckpts.iter().find(|c| c.id == *id).expect("source on schedule"))
            .collect();
        let tokens: Vec<u64> = src_ckpts.iter().map(|c| c.tokens_seen).collect();
        export_ie_evolution(all, &tokens, an.evolution_n, &s.path(&rel("ie_evolution.tsv")))?;
        out.push(rel("ie_evolution.tsv"));

        let mut features = Vec::new();
        for c in 0..sources.len() {
            for f in all.top_k(c, an.top_k) {
                if !features.contains(&f) {
                    features.push(f);
                }
            }
        }
        let (params, norms) = load_crosscoder(&s.path(&crosscoder_file(&name, seed)))?;
        let seqs = s.sequences(EVAL_CORPUS, &vocab)?;
        let seqs = &seqs[..an.scan_sequences.min(seqs.len())];
        let skip = [vocab.bos(), vocab.pad()];
        let tops = top_activating_sequences(&params, &norms, &src_ckpts, seqs, &skip, &features, an.top_sequences)?;
        export_annotations(all, &tops, &vocab, &s.path(&rel("annotations.tsv")))?;
        out.push(rel("annotations.tsv"));
        Ok(out)
    })
}
