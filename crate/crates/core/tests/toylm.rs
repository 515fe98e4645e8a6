use ndarray::Array2;
use rand::Rng;
use xct_core::corpus::{generate_corpus, generate_minimal_pairs, pack_sequences, GrammarSpec, Template};
use xct_core::toylm::{train_lm, Checkpoint, LmConfig, MetricSpec, OptimizerSettings};
use xct_core::util::rng;
use xct_core::Error;

fn small_config(vocab: usize, seed: u64) -> LmConfig {
    LmConfig { n_layers: 2, d_model: 16, n_heads: 2, vocab_size: vocab, context_len: 16, mid_layer: 1, seed }
}

fn corpus_sequences(spec: &GrammarSpec, ctx: usize, n_tokens: usize, seed: u64) -> Vec<Vec<u32>> {
    let vocab = spec.vocab();
    let c = generate_corpus(spec, n_tokens, seed).unwrap();
    pack_sequences(&c, ctx, vocab.bos(), vocab.pad()).unwrap()
}

/// A briefly trained default-size model, so every parameter carries gradient.
fn trained_toy(steps: u64) -> (GrammarSpec, Vec<Checkpoint>) {
    let spec = GrammarSpec::default();
    let vocab = spec.vocab();
    let cfg = LmConfig { seed: 5, ..LmConfig::toy(vocab.len()) };
    let seqs = corpus_sequences(&spec, cfg.context_len, 64 * 4 * (steps as usize + 2), 3);
    let opt = OptimizerSettings { batch_seqs: 4, ..Default::default() };
    let ck = train_lm(&cfg, &seqs, &[steps / 2, steps], &opt, vocab.pad(), |_| {}).unwrap();
    (spec, ck)
}

#[test]
fn schedule_bookkeeping() {
    let spec = GrammarSpec::default();
    let vocab = spec.vocab();
    let cfg = LmConfig { d_model: 8, n_heads: 1, n_layers: 1, ..small_config(vocab.len(), 1) };
    let opt = OptimizerSettings { batch_seqs: 1, ..Default::default() };
    let seqs = corpus_sequences(&spec, cfg.context_len, 16 * 1100, 1);
    let ck = train_lm(&cfg, &seqs, &[0, 100, 1000], &opt, vocab.pad(), |_| {}).unwrap();
    let steps: Vec<u64> = ck.iter().map(|c| c.step).collect();
    assert_eq!(steps, [0, 100, 1000]);
    for c in &ck {
        assert_eq!(c.tokens_seen, c.step * 16);
        assert_eq!(c.id, format!("step{}", c.step));
    }
}

#[test]
fn training_is_bit_identical_across_reruns() {
    let spec = GrammarSpec::default();
    let vocab = spec.vocab();
    let cfg = small_config(vocab.len(), 9);
    let seqs = corpus_sequences(&spec, 16, 16 * 4 * 60, 2);
    let opt = OptimizerSettings { batch_seqs: 4, ..Default::default() };
    let a = train_lm(&cfg, &seqs, &[20, 50], &opt, vocab.pad(), |_| {}).unwrap();
    let b = train_lm(&cfg, &seqs, &[20, 50], &opt, vocab.pad(), |_| {}).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[2].to_bytes(), b[2].to_bytes());
}

#[test]
fn exhausted_corpus_reports_completed_steps() {
    let spec = GrammarSpec::default();
    let vocab = spec.vocab();
    let cfg = small_config(vocab.len(), 1);
    let seqs = corpus_sequences(&spec, 16, 16 * 10, 2);
    let opt = OptimizerSettings { batch_seqs: 2, ..Default::default() };
    let n = seqs.len() as u64;
    match train_lm(&cfg, &seqs, &[1000], &opt, vocab.pad(), |_| {}) {
        Err(Error::CorpusExhausted { completed, requested }) => {
            assert_eq!(completed, n / 2);
            assert_eq!(requested, 1000);
        }
        other => panic!("expected exhaustion, got {other:?}"),
    }
}

#[test]
fn non_increasing_schedule_is_rejected() {
    let spec = GrammarSpec::default();
    let cfg = small_config(spec.vocab().len(), 1);
    let seqs = corpus_sequences(&spec, 16, 2000, 2);
    let r = train_lm(&cfg, &seqs, &[10, 10], &OptimizerSettings::default(), 1, |_| {});
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn outputs_are_normalized_and_inputs_validated() {
    let (spec, ck) = trained_toy(20);
    let vocab = spec.vocab();
    let mut r = rng(3);
    for c in &ck {
        let toks: Vec<u32> = (0..40).map(|_| r.random_range(0..vocab.len() as u32)).collect();
        let lp = c.forward_logits(&toks).unwrap();
        assert_eq!(lp.dim(), (40, vocab.len()));
        for row in lp.rows() {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        assert!(matches!(c.forward_logits(&[0, vocab.len() as u32]), Err(Error::Input(_))));
        assert!(matches!(c.forward_logits(&vec![0; 65]), Err(Error::Input(_))));
    }
}

#[test]
fn splice_identity_and_degenerate_patch() {
    let (_, ck) = trained_toy(20);
    let toks: Vec<u32> = vec![0, 4, 9, 20, 33, 3, 4, 60, 12];
    for c in &ck {
        let acts = c.capture_midlayer(&toks).unwrap();
        assert_eq!(acts.dim(), (toks.len(), 64));
        let a = c.forward_logits(&toks).unwrap();
        let b = c.forward_from_midlayer(acts.view()).unwrap();
        assert!((&a - &b).iter().all(|v| v.abs() <= 1e-5));
        let z = c.forward_from_midlayer(Array2::zeros(acts.raw_dim()).view()).unwrap();
        assert!(z.iter().all(|v| v.is_finite()));
        assert!(matches!(c.forward_from_midlayer(Array2::zeros((3, 63)).view()), Err(Error::Input(_))));
    }
    let a0 = ck[0].capture_midlayer(&toks).unwrap();
    let a1 = ck[2].capture_midlayer(&toks).unwrap();
    assert!((&a0 - &a1).mapv(|v| v * v).sum() > 1e-6);
}

#[test]
fn metric_gradient_matches_central_differences() {
    let (_, ck) = trained_toy(20);
    let toks: Vec<u32> = vec![0, 4, 9, 20, 33, 3, 4, 60];
    let spec = MetricSpec { correct: 40, wrong: 41, position: 7 };
    let mut r = rng(11);
    for c in &ck[1..] {
        let acts = c.capture_midlayer(&toks).unwrap();
        let (m, g) = c.grad_metric_wrt_midlayer(acts.view(), &spec).unwrap();
        assert!((m - c.metric_from_midlayer(acts.view(), &spec).unwrap()).abs() < 1e-12);
        let h = 1e-3;
        for _ in 0..50 {
            let (p, j) = (r.random_range(0..toks.len()), r.random_range(0..64));
            let mut up = acts.clone();
            up[[p, j]] += h;
            let mut dn = acts.clone();
            dn[[p, j]] -= h;
            let fd = (c.metric_from_midlayer(up.view(), &spec).unwrap() - c.metric_from_midlayer(dn.view(), &spec).unwrap()) / (2.0 * h);
            let an = g[[p, j]];
            assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-3), "({p},{j}) {an} vs {fd}");
        }
        // First-order response of the patched forward.
        let eps = 1e-6;
        let mut moved = acts.clone();
        moved[[3, 5]] += eps;
        let dm = c.metric_from_midlayer(moved.view(), &spec).unwrap() - m;
        assert!((dm - eps * g[[3, 5]]).abs() <= 1e-3 * (eps * g[[3, 5]]).abs() + 1e-11);
    }
}

#[test]
fn metric_gradient_is_causal_and_linear() {
    let (_, ck) = trained_toy(20);
    let c = &ck[2];
    let toks: Vec<u32> = vec![0, 4, 9, 20, 33, 3, 4, 60, 8, 7];
    let acts = c.capture_midlayer(&toks).unwrap();
    let ab = MetricSpec { correct: 40, wrong: 41, position: 5 };
    let bc = MetricSpec { correct: 41, wrong: 42, position: 5 };
    let ac = MetricSpec { correct: 40, wrong: 42, position: 5 };
    let (_, g) = c.grad_metric_wrt_midlayer(acts.view(), &ab).unwrap();
    assert!(g.slice(ndarray::s![6.., ..]).iter().all(|&v| v == 0.0));
    assert!(g.slice(ndarray::s![..6, ..]).iter().any(|&v| v != 0.0));
    let mut later = acts.clone();
    later.slice_mut(ndarray::s![6.., ..]).fill(3.0);
    let m0 = c.metric_from_midlayer(acts.view(), &ab).unwrap();
    assert_eq!(m0, c.metric_from_midlayer(later.view(), &ab).unwrap());
    // m(a,c) = m(a,b) + m(b,c), so the gradients add.
    let (_, g2) = c.grad_metric_wrt_midlayer(acts.view(), &bc).unwrap();
    let (_, g3) = c.grad_metric_wrt_midlayer(acts.view(), &ac).unwrap();
    assert!((&g + &g2 - &g3).iter().all(|v| v.abs() < 1e-9));
    // Swapping correct and wrong negates the gradient.
    let ba = MetricSpec { correct: 41, wrong: 40, position: 5 };
    let (_, gn) = c.grad_metric_wrt_midlayer(acts.view(), &ba).unwrap();
    assert!((&g + &gn).iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn stacked_gradients_match_one_at_a_time() {
    let (_, ck) = trained_toy(20);
    let c = &ck[2];
    let toks: Vec<u32> = vec![0, 4, 9, 20, 33, 3];
    let spec = MetricSpec { correct: 40, wrong: 41, position: 5 };
    let base = c.capture_midlayer(&toks).unwrap();
    let mut r = rng(3);
    let inputs: Vec<Array2<f64>> = (0..5).map(|_| base.mapv(|v| v + r.random_range(-0.5..0.5))).collect();
    let views: Vec<_> = inputs.iter().map(|a| a.view()).collect();
    let batch = c.grad_metric_wrt_midlayer_batch(&views, &spec).unwrap();
    assert_eq!(batch.len(), 5);
    for (a, (m, g)) in inputs.iter().zip(&batch) {
        let (m1, g1) = c.grad_metric_wrt_midlayer(a.view(), &spec).unwrap();
        assert!((m - m1).abs() < 1e-12);
        assert!((g - &g1).iter().all(|v| v.abs() < 1e-12));
    }
    let short = base.slice(ndarray::s![..4, ..]);
    assert!(c.grad_metric_wrt_midlayer_batch(&[base.view(), short], &spec).is_err());
}

#[test]
fn untrained_model_is_at_chance_on_balanced_pairs() {
    let (spec, ck) = trained_toy(2);
    let vocab = spec.vocab();
    let mut pairs = generate_minimal_pairs(&spec, 300, "simple-regular", 1).unwrap();
    pairs.extend(generate_minimal_pairs(&spec, 300, "distractor-relative", 2).unwrap());
    let acc = xct_core::analysis::accuracy_curve(&[&ck[0]], &pairs, vocab.bos()).unwrap();
    assert!((acc[0].accuracy - 0.5).abs() <= 0.05);
}

#[test]
fn cross_entropy_approaches_template_entropy() {
    let mut spec = GrammarSpec::default();
    spec.holdout = false;
    spec.templates = vec![Template { name: "only".into(), pattern: "the NOUN_SG VERB_SG .".into(), weight: 1.0 }];
    let vocab = spec.vocab();
    let per_sentence = (spec.lexicon.regular_nouns.len() as f64).ln() + (spec.lexicon.verbs.len() as f64).ln();
    let expected = per_sentence / 4.0;
    let cfg = LmConfig { d_model: 32, ..small_config(vocab.len(), 4) };
    let steps = 400;
    let seqs = corpus_sequences(&spec, 16, 16 * 8 * (steps + 40), 5);
    let opt = OptimizerSettings { batch_seqs: 8, ..Default::default() };
    let ck = train_lm(&cfg, &seqs, &[steps as u64], &opt, vocab.pad(), |_| {}).unwrap();
    let held_out = corpus_sequences(&spec, 16, 16 * 300, 99);
    let (mut nll, mut n) = (0.0, 0);
    for s in &held_out {
        let lp = ck[1].forward_logits(s).unwrap();
        let (a, b) = Checkpoint::sequence_nll(&lp.view(), s, vocab.pad());
        nll += a;
        n += b;
    }
    let ce = nll / n as f64;
    assert!(ce >= expected - 0.02 && ce <= expected + 0.05, "CE {ce} vs entropy {expected}");
}

#[test]
fn checkpoint_files_round_trip() {
    let (_, ck) = trained_toy(4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("step4.xclm");
    ck[2].save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck[2]);
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(Checkpoint::meta_path(&path)).unwrap()).unwrap();
    assert_eq!(meta["step"], 4);
    assert_eq!(meta["tokens_seen"], 4 * 4 * 64);
    assert_eq!(meta["seed"], 5);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'Z';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
}
