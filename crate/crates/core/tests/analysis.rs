use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use xct_core::actstore::NormStats;
use xct_core::analysis::*;
use xct_core::attribution::{AttributionContext, AttributionTable, IGConfig, MidLayerModel};
use xct_core::corpus::{generate_corpus, generate_minimal_pairs, pack_sequences, GrammarSpec, MinimalPair};
use xct_core::dictcore::CrosscoderParams;
use xct_core::toylm::{train_lm, Checkpoint, LmConfig, OptimizerSettings};
use xct_core::util::rng;
use xct_core::Error;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

#[test]
fn spearman_closed_forms() {
    assert!(close(spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 35.0, 90.0]).unwrap(), 1.0));
    assert!(close(spearman(&[1.0, 2.0, 3.0, 4.0], &[9.0, 7.0, 3.0, -1.0]).unwrap(), -1.0));
    // No ties: 1 − 6Σd²/(n(n²−1)) with d = (0, 1, −1, 0, 0) → 1 − 12/120.
    assert!(close(spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0, 3.0, 2.0, 4.0, 5.0]).unwrap(), 0.9));
    // Ties: ranks (1.5, 1.5, 3, 4) vs (1, 2, 3, 4); Pearson of ranks = √0.9 · ... closed form below.
    let r = spearman(&[5.0, 5.0, 6.0, 7.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let (a, b) = ([1.5, 1.5, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0]);
    let (ma, mb) = (2.5, 2.5);
    let sab: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let saa: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let sbb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    assert!(close(r, sab / (saa * sbb).sqrt()));
    assert!(close(r, 4.5 / (4.5f64 * 5.0).sqrt()));
    assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 3.0, 0.0]), vec![4.0, 2.0, 4.0, 4.0, 1.0]);
    assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
    assert_eq!(spearman(&[1.0], &[1.0]), None);
}

proptest! {
    #[test]
    fn spearman_is_bounded_and_rank_invariant(v in prop::collection::vec((-5i32..5, -5i32..5), 3..30)) {
        let a: Vec<f64> = v.iter().map(|x| x.0 as f64).collect();
        let b: Vec<f64> = v.iter().map(|x| x.1 as f64).collect();
        if let Some(r) = spearman(&a, &b) {
            prop_assert!((-1.0..=1.0).contains(&r));
            let a3: Vec<f64> = a.iter().map(|x| x * x * x + 2.0).collect();
            prop_assert!((spearman(&a3, &b).unwrap() - r).abs() < 1e-12);
            prop_assert!((spearman(&b, &a).unwrap() - r).abs() < 1e-12);
        }
    }
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i}")).collect()
}

fn uniform_sim(n: usize, v: f64) -> SimilarityMatrix {
    SimilarityMatrix {
        ids: ids(n),
        values: (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { v }).collect()).collect(),
        skipped: 0,
    }
}

#[test]
fn transition_suggestions() {
    let none = suggest_transitions(&ids(5), &[0.5; 5], Some(&uniform_sim(5, 0.8)), 1, 0.1).unwrap();
    assert!(none.is_empty());
    let jump = suggest_transitions(&ids(4), &[0.5, 0.5, 0.9, 0.9], None, 1, 0.1).unwrap();
    assert_eq!(jump.iter().map(|s| s.index).collect::<Vec<_>>(), vec![2]);
    assert_eq!(jump[0].checkpoint, "c2");
    let again = suggest_transitions(&ids(4), &[0.5, 0.5, 0.9, 0.9], None, 1, 0.1).unwrap();
    assert_eq!(jump, again);

    let mut sim = uniform_sim(5, 0.9);
    sim.values[2][3] = 0.3;
    sim.values[3][2] = 0.3;
    let s = suggest_transitions(&ids(5), &[0.5; 5], Some(&sim), 1, 0.1).unwrap();
    assert_eq!(s.iter().map(|s| s.index).collect::<Vec<_>>(), vec![3]);
    assert!(suggest_transitions(&ids(2), &[0.5, 0.9], None, 1, 0.1).is_err());
}

fn table(ie: Vec<Vec<f64>>, crosscoder: &str) -> AttributionTable {
    let d = ie[0].len();
    AttributionTable {
        crosscoder: crosscoder.into(),
        slice: "s".into(),
        sources: (0..ie.len()).map(|c| format!("s{c}")).collect(),
        n_examples: 1,
        dec_norms: vec![vec![1.0; d]; ie.len()],
        ie_raw: ie.clone(),
        ie,
        ie_exact: None,
    }
}

#[test]
fn overlap_examples() {
    let mut a = vec![0.0; 40];
    let mut b = vec![0.0; 40];
    for i in 0..10 {
        a[i] = 1.0 + i as f64;
        b[20 + i] = 1.0 + i as f64;
    }
    // Four planted high-IE features shared by both slices.
    let mut c = b.clone();
    for i in 0..4 {
        c[i] = 100.0;
    }
    let (ta, tb, tc) = (table(vec![a.clone()], "x"), table(vec![b], "x"), table(vec![c], "x"));
    let m = overlap_counts(&[&ta, &tb, &tc, &ta], "s0", 10).unwrap();
    assert_eq!(m[0][0], 10);
    assert_eq!(m[0][1], 0);
    assert_eq!(m[0][2], 4);
    assert_eq!(m[0][3], 10);
    for i in 0..4 {
        for j in 0..4 {
            assert_eq!(m[i][j], m[j][i]);
            assert!(m[i][j] <= 10);
        }
    }
    let mut few = vec![0.0; 40];
    few[..7].iter_mut().for_each(|v| *v = 0.5);
    let tf = table(vec![few], "x");
    assert_eq!(overlap_counts(&[&tf], "s0", 10).unwrap()[0][0], 7);
    let other = table(vec![a], "y");
    assert!(overlap_counts(&[&ta, &other], "s0", 10).is_err());
}

fn small_lm() -> (Vec<Checkpoint>, GrammarSpec, Vec<Vec<u32>>) {
    let spec = GrammarSpec::default();
    let vocab = spec.vocab();
    let cfg = LmConfig { n_layers: 2, d_model: 16, n_heads: 2, vocab_size: vocab.len(), context_len: 16, mid_layer: 1, seed: 8 };
    let c = generate_corpus(&spec, 16 * 4 * 80, 9).unwrap();
    let seqs = pack_sequences(&c, 16, vocab.bos(), vocab.pad()).unwrap();
    let opt = OptimizerSettings { batch_seqs: 4, ..Default::default() };
    let ck = train_lm(&cfg, &seqs, &[30, 60], &opt, vocab.pad(), |_| {}).unwrap();
    (ck, spec, seqs)
}

fn random_params(sources: &[&str], d: usize, dict: usize, seed: u64) -> CrosscoderParams {
    let mut p = CrosscoderParams::zeros(sources.iter().map(|s| s.to_string()).collect(), dict, d).unwrap();
    let mut r = rng(seed);
    for c in 0..sources.len() {
        p.w_enc[c].mapv_inplace(|_| r.sample::<f64, _>(StandardNormal) * 0.3);
        p.w_dec[c].mapv_inplace(|_| r.sample::<f64, _>(StandardNormal) * 0.3);
    }
    p.b_enc.mapv_inplace(|_| r.random_range(-0.6..0.1));
    p
}

#[test]
fn similarity_matrix_has_unit_diagonal_and_symmetry() {
    let (ck, spec, _) = small_lm();
    let refs: Vec<&Checkpoint> = ck.iter().collect();
    let pairs = generate_minimal_pairs(&spec, 20, "distractor-relative", 3).unwrap();
    for pos in [SimilarityPosition::FinalToken, SimilarityPosition::MeanOverPositions] {
        for measure in [SimilarityMeasure::Cosine, SimilarityMeasure::Pearson] {
            let m = similarity_matrix(&refs, &pairs, spec.vocab().bos(), pos, measure).unwrap();
            for i in 0..3 {
                assert!((m.values[i][i] - 1.0).abs() < 1e-6);
                for j in 0..3 {
                    assert_eq!(m.values[i][j], m.values[j][i]);
                    assert!(m.values[i][j].abs() <= 1.0);
                }
            }
        }
    }
    assert!(similarity_matrix(&refs[..1], &pairs, 0, SimilarityPosition::FinalToken, SimilarityMeasure::Cosine).is_err());
}

#[test]
fn accuracy_curve_groups_by_subtask() {
    let (ck, spec, _) = small_lm();
    let refs: Vec<&Checkpoint> = ck.iter().collect();
    let mut pairs = generate_minimal_pairs(&spec, 10, "simple-regular", 1).unwrap();
    pairs.extend(generate_minimal_pairs(&spec, 6, "distractor-relational", 1).unwrap());
    let curve = accuracy_curve(&refs, &pairs, spec.vocab().bos()).unwrap();
    for c in &ck {
        let pts: Vec<&AccuracyPoint> = curve.iter().filter(|p| p.checkpoint == c.id).collect();
        assert_eq!(pts.len(), 3);
        let all = pts.iter().find(|p| p.task == ALL_TASKS).unwrap();
        assert_eq!(all.n, 16);
        assert_eq!(all.tokens_seen, c.tokens_seen);
        let weighted: f64 = pts.iter().filter(|p| p.task != ALL_TASKS).map(|p| p.accuracy * p.n as f64).sum();
        assert!((weighted / 16.0 - all.accuracy).abs() < 1e-12);
        assert!(pts.iter().all(|p| (0.0..=1.0).contains(&p.accuracy)));
    }
    // Zero unembedding at step 0: every pair ties, half credit each.
    assert_eq!(curve.iter().find(|p| p.checkpoint == "step0" && p.task == ALL_TASKS).unwrap().accuracy, 0.5);
}

/// Full-sort oracle: every sequence's max activation, sorted descending
/// with ties by sequence index.
fn brute_force_top(params: &CrosscoderParams, norms: &[NormStats], ck: &[&Checkpoint], seqs: &[Vec<u32>], skip: &[u32], feature: usize, m: usize) -> Vec<(usize, f64)> {
    let mut all = Vec::new();
    for (q, s) in seqs.iter().enumerate() {
        let mut best = 0.0f64;
        for p in 0..s.len() {
            if skip.contains(&s[p]) {
                continue;
            }
            let xs: Vec<ndarray::Array1<f64>> = ck.iter().zip(norms).map(|(c, n)| c.capture_midlayer(s).unwrap().row(p).to_owned() / n.scale).collect();
            let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
            best = best.max(params.encode(&views).unwrap()[feature]);
        }
        if best > 0.0 {
            all.push((q, best));
        }
    }
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(m);
    all
}

#[test]
fn top_activations_match_full_sort_oracle() {
    let (ck, spec, seqs) = small_lm();
    let vocab = spec.vocab();
    let refs = [&ck[1], &ck[2]];
    let mut params = random_params(&["step30", "step60"], 16, 12, 4);
    params.b_enc[11] = -1e6;
    let norms = vec![NormStats { source: "step30".into(), scale: 1.2 }, NormStats { source: "step60".into(), scale: 0.8 }];
    let seqs = &seqs[..60];
    let skip = [vocab.bos(), vocab.pad()];
    let features: Vec<usize> = (0..12).collect();
    let tops = top_activating_sequences(&params, &norms, &refs, seqs, &skip, &features, 7).unwrap();
    assert_eq!(tops, top_activating_sequences(&params, &norms, &refs, seqs, &skip, &features, 7).unwrap());
    assert!(tops.sequences[11].is_empty());
    for &f in &features {
        let want = brute_force_top(&params, &norms, &refs, seqs, &skip, f, 7);
        let got: Vec<(usize, f64)> = tops.sequences[f].iter().map(|t| (t.sequence_index, t.max)).collect();
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert_eq!(g.0, w.0);
            assert!((g.1 - w.1).abs() < 1e-9);
        }
        for t in &tops.sequences[f] {
            assert!(t.acts.iter().all(|&a| a >= 0.0));
            assert_eq!(t.acts[t.argmax], t.max);
            assert_eq!(t.tokens, seqs[t.sequence_index]);
        }
    }
}

#[test]
fn ablation_of_inactive_feature_changes_nothing() {
    let (ck, spec, _) = small_lm();
    let vocab = spec.vocab();
    let mut params = random_params(&["step30", "step60"], 16, 10, 5);
    params.b_enc.fill(0.5);
    params.b_enc[3] = -1e6;
    let norms = vec![NormStats { source: "step30".into(), scale: 1.0 }, NormStats { source: "step60".into(), scale: 1.0 }];
    let models: Vec<&dyn MidLayerModel> = vec![&ck[1], &ck[2]];
    let ctx = AttributionContext::new(&params, &norms, models, vocab.bos()).unwrap();
    let pairs: Vec<MinimalPair> = generate_minimal_pairs(&spec, 8, "simple-regular", 2).unwrap();
    let ie0: Vec<f64> = (0..10).map(|i| 1.0 + i as f64).collect();
    let ie1: Vec<f64> = (0..10).map(|i| 10.0 - i as f64 * 0.5).collect();
    let mut t = table(vec![ie0, ie1], "x");
    t.sources = params.sources.clone();
    t.dec_norms = (0..2).map(|c| params.dec_norms(c).to_vec()).collect();
    let v = ablation_validation(&ctx, &pairs, &t, 10, &IGConfig::default()).unwrap();
    let row = v.rows.iter().find(|r| r.feature == 3).unwrap();
    assert_eq!(row.delta, [0.0, 0.0]);
    assert!(row.ratio.is_nan());
    assert_eq!(v.n_used, 9);
    assert!((-1.0..=1.0).contains(&v.spearman_relie) && (-1.0..=1.0).contains(&v.spearman_reldec));
}

#[test]
fn exports_follow_line_formats() {
    let dir = tempfile::tempdir().unwrap();
    let mut ie = vec![vec![0.0; 6]; 3];
    ie[1][0] = 0.7;
    ie[0][1] = 0.53;
    ie[1][1] = -0.33;
    ie[2][1] = 0.15;
    ie[2][4] = 0.2;
    let t = table(ie, "x");
    let path = dir.path().join("ternary.tsv");
    export_ternary(&t, 10, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(&rows[0][..4], &["0", "0", "1", "0"]);
    for r in &rows {
        let s: f64 = r[1..4].iter().map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
    let two = table(vec![vec![1.0; 3]; 2], "x");
    let err = export_ternary(&two, 10, &path).unwrap_err();
    assert!(err.to_string().contains("ie_c3"), "{err}");

    let evo = dir.path().join("evo.tsv");
    export_ie_evolution(&t, &[100, 200, 300], 1, &evo).unwrap();
    let text = std::fs::read_to_string(&evo).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 3);
    assert!(text.lines().nth(1).unwrap().starts_with("1\ttop\ts0\t100\t"));

    let (ck, spec, seqs) = small_lm();
    let vocab = spec.vocab();
    let params = random_params(&["s0", "s1", "s2"], 16, 6, 6);
    let norms: Vec<NormStats> = (0..3).map(|c| NormStats { source: format!("s{c}"), scale: 1.0 }).collect();
    let mut renamed: Vec<Checkpoint> = ck.clone();
    for (c, k) in renamed.iter_mut().enumerate() {
        k.id = format!("s{c}");
    }
    let refs: Vec<&Checkpoint> = renamed.iter().collect();
    let tops = top_activating_sequences(&params, &norms, &refs, &seqs[..10], &[vocab.bos(), vocab.pad()], &[1, 4], 3).unwrap();
    let ann = dir.path().join("ann.tsv");
    export_annotations(&t, &tops, &vocab, &ann).unwrap();
    let text = std::fs::read_to_string(&ann).unwrap();
    for f in ["1", "4"] {
        let q = text.lines().filter(|l| l.starts_with(&format!("{f}\tquestion\t"))).count();
        assert_eq!(q, 4);
    }
    let keys: Vec<&str> = ANNOTATION_QUESTIONS.iter().map(|q| q.0).collect();
    assert_eq!(keys, ["description", "interpretability", "complexity", "languages"]);

    let sim = uniform_sim(2, 0.5);
    let hm = dir.path().join("heat.tsv");
    export_heatmap(&sim, &hm).unwrap();
    assert_eq!(std::fs::read_to_string(&hm).unwrap().lines().count(), 5);
    assert!(matches!(export_ie_evolution(&t, &[1], 1, &evo), Err(Error::Input(_))));
}
