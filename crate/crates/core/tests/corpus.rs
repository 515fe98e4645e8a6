use std::collections::HashSet;

use proptest::prelude::*;
use xct_core::corpus::*;

#[derive(Debug, PartialEq)]
enum Verdict {
    Grammatical,
    AgreementViolation,
    Malformed,
}

/// Rule-based checker for the agreement language, working on surface words.
struct GrammarOracle {
    nouns: Vec<(String, Number)>,
    verbs: Vec<(String, Number)>,
    tverbs: Vec<(String, Number)>,
    preps: HashSet<String>,
    adjs: HashSet<String>,
}

impl GrammarOracle {
    fn new(spec: &GrammarSpec) -> Self {
        let split = |xs: &[(String, String)]| {
            xs.iter()
                .flat_map(|(s, p)| [(s.clone(), Number::Singular), (p.clone(), Number::Plural)])
                .collect::<Vec<_>>()
        };
        let lex = &spec.lexicon;
        let mut nouns = split(&lex.regular_nouns);
        nouns.extend(split(&lex.irregular_nouns));
        GrammarOracle {
            nouns,
            verbs: split(&lex.verbs),
            tverbs: split(&lex.transitive_verbs),
            preps: lex.prepositions.iter().cloned().collect(),
            adjs: lex.adjectives.iter().cloned().collect(),
        }
    }

    fn number(list: &[(String, Number)], w: &str) -> Option<Number> {
        list.iter().find(|(x, _)| x == w).map(|(_, n)| *n)
    }

    fn judge(&self, words: &[&str]) -> Verdict {
        use Verdict::*;
        let mut i = 0;
        if words.first() != Some(&"the") {
            return Malformed;
        }
        i += 1;
        if words.get(i).is_some_and(|w| self.adjs.contains(*w)) {
            i += 1;
        }
        let Some(subject) = words.get(i).and_then(|w| Self::number(&self.nouns, w)) else {
            return Malformed;
        };
        i += 1;
        let mut ok = true;
        match words.get(i) {
            Some(w) if self.preps.contains(*w) => {
                if words.get(i + 1) != Some(&"the") || words.get(i + 2).and_then(|w| Self::number(&self.nouns, w)).is_none() {
                    return Malformed;
                }
                i += 3;
            }
            Some(&"that") => {
                let Some(n) = words.get(i + 1).and_then(|w| Self::number(&self.tverbs, w)) else {
                    return Malformed;
                };
                ok &= n == subject;
                if words.get(i + 2) != Some(&"the") || words.get(i + 3).and_then(|w| Self::number(&self.nouns, w)).is_none() {
                    return Malformed;
                }
                i += 4;
            }
            _ => {}
        }
        let Some(v) = words.get(i).and_then(|w| Self::number(&self.verbs, w)) else {
            return Malformed;
        };
        if words.get(i + 1) != Some(&".") || words.len() != i + 2 {
            return Malformed;
        }
        if ok && v == subject { Grammatical } else { AgreementViolation }
    }
}

fn words<'a>(vocab: &'a Vocab, ids: &[u32]) -> Vec<&'a str> {
    ids.iter().map(|&t| vocab.token(t).unwrap()).collect()
}

#[test]
fn every_generated_sentence_is_grammatical() {
    let spec = GrammarSpec::default();
    let vocab = spec.vocab();
    let oracle = GrammarOracle::new(&spec);
    let c = generate_corpus(&spec, 20_000, 4).unwrap();
    assert!(c.tokens.len() >= 20_000);
    for s in c.sentences() {
        assert_eq!(oracle.judge(&words(&vocab, s)), Verdict::Grammatical, "{:?}", words(&vocab, s));
    }
}

#[test]
fn pairs_complete_to_grammatical_and_violating_sentences() {
    let spec = GrammarSpec::default();
    let vocab = spec.vocab();
    let oracle = GrammarOracle::new(&spec);
    let dot = vocab.id(".").unwrap();
    for (k, st) in ["simple-regular", "simple-irregular", "distractor-relational", "distractor-relative"].iter().enumerate() {
        for p in generate_minimal_pairs(&spec, 100, st, k as u64).unwrap() {
            let mut good = p.prefix.clone();
            good.extend([p.correct, dot]);
            let mut bad = p.prefix.clone();
            bad.extend([p.wrong, dot]);
            assert_eq!(oracle.judge(&words(&vocab, &good)), Verdict::Grammatical);
            assert_eq!(oracle.judge(&words(&vocab, &bad)), Verdict::AgreementViolation);
            assert_eq!(p.task, "agreement");
            assert_eq!(p.subtask, *st);
        }
    }
}

#[test]
fn held_out_prefixes_never_occur_in_the_training_stream() {
    let spec = GrammarSpec::default();
    assert!(spec.holdout);
    let mut prefixes = HashSet::new();
    for (k, st) in ["simple-regular", "simple-irregular", "distractor-relational", "distractor-relative"].iter().enumerate() {
        for p in generate_minimal_pairs(&spec, 300, st, 50 + k as u64).unwrap() {
            prefixes.insert(p.prefix);
        }
    }
    let c = generate_corpus(&spec, 100_000, 8).unwrap();
    let verbs: HashSet<u32> = {
        let v = spec.vocab();
        spec.lexicon.verbs.iter().flat_map(|(s, p)| [v.id(s).unwrap(), v.id(p).unwrap()]).collect()
    };
    for s in c.sentences() {
        let main = s.iter().rposition(|t| verbs.contains(t)).unwrap();
        assert!(!prefixes.contains(&s[..main].to_vec()));
    }
}

#[test]
fn single_template_stream_repeats_the_pattern() {
    let mut spec = GrammarSpec::default();
    spec.holdout = false;
    spec.templates = vec![Template { name: "t".into(), pattern: "NOUN_SG VERB_SG .".into(), weight: 1.0 }];
    let vocab = spec.vocab();
    let c = generate_corpus(&spec, 3, 0).unwrap();
    assert_eq!(c.tokens.len(), 3);
    let c = generate_corpus(&spec, 300, 0).unwrap();
    let sg_nouns: HashSet<u32> = spec.lexicon.regular_nouns.iter().map(|(s, _)| vocab.id(s).unwrap()).collect();
    let sg_verbs: HashSet<u32> = spec.lexicon.verbs.iter().map(|(s, _)| vocab.id(s).unwrap()).collect();
    for w in c.tokens.chunks(3) {
        assert!(sg_nouns.contains(&w[0]) && sg_verbs.contains(&w[1]) && w[2] == c.eos);
    }
}

#[test]
fn sentence_numbers_follow_template_weights() {
    let spec = GrammarSpec::default();
    let vocab = spec.vocab();
    let c = generate_corpus(&spec, 10_000, 1).unwrap();
    let plural_nouns: HashSet<u32> = spec
        .lexicon
        .regular_nouns
        .iter()
        .chain(&spec.lexicon.irregular_nouns)
        .map(|(_, p)| vocab.id(p).unwrap())
        .collect();
    let nouns: HashSet<u32> = spec
        .lexicon
        .regular_nouns
        .iter()
        .chain(&spec.lexicon.irregular_nouns)
        .flat_map(|(s, p)| [vocab.id(s).unwrap(), vocab.id(p).unwrap()])
        .collect();
    let (mut sg, mut total) = (0usize, 0usize);
    for s in c.sentences() {
        let subject = s.iter().find(|t| nouns.contains(t)).unwrap();
        total += 1;
        if !plural_nouns.contains(subject) {
            sg += 1;
        }
    }
    let want: f64 = spec.templates.iter().filter(|t| t.subject_number() == Some(Number::Singular)).map(|t| t.weight).sum();
    let got = sg as f64 / total as f64;
    assert!((got - want).abs() <= 0.05, "singular share {got} vs weight {want}");
}

#[test]
fn pair_counts_are_balanced() {
    let spec = GrammarSpec::default();
    let vocab = spec.vocab();
    let pairs = generate_minimal_pairs(&spec, 200, "distractor-relational", 7).unwrap();
    assert_eq!(pairs.len(), 200);
    let plural_verbs: HashSet<u32> = spec.lexicon.verbs.iter().map(|(_, p)| vocab.id(p).unwrap()).collect();
    let plural = pairs.iter().filter(|p| plural_verbs.contains(&p.correct)).count();
    assert_eq!(plural, 100);
}

#[test]
fn agreement_examples() {
    let spec = GrammarSpec::default();
    let v = spec.vocab();
    let oracle = GrammarOracle::new(&spec);
    let id = |w: &str| v.id(w).unwrap();
    let p = MinimalPair {
        prefix: vec![id("the"), id("cats")],
        correct: id("sleep"),
        wrong: id("sleeps"),
        task: "agreement".into(),
        subtask: "simple-regular".into(),
        slice: "simple-regular".into(),
    };
    assert_eq!(oracle.judge(&["the", "cats", "sleep", "."]), Verdict::Grammatical);
    assert_eq!(oracle.judge(&["the", "keys", "near", "the", "car", "sleep", "."]), Verdict::Grammatical);
    assert_eq!(oracle.judge(&["the", "keys", "near", "the", "car", "sleeps", "."]), Verdict::AgreementViolation);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.tsv");
    write_minimal_pairs(&path, &[p.clone(), p.swapped()]).unwrap();
    let back = load_minimal_pairs(&path).unwrap();
    assert_eq!(back, vec![p.clone(), p.swapped()]);
}

#[test]
fn invalid_pair_file_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.tsv");
    std::fs::write(&path, "4 5\t6\t7\tagreement\tx\ty\n4 5\t6\t6\tagreement\tx\ty\n").unwrap();
    let err = load_minimal_pairs(&path).unwrap_err();
    assert!(matches!(err, xct_core::Error::Validation { line: 2, .. }), "{err}");
    std::fs::write(&path, "4 5\t6 8\t7\tagreement\tx\ty\n").unwrap();
    let err = load_minimal_pairs(&path).unwrap_err();
    assert!(matches!(err, xct_core::Error::Validation { line: 1, .. }), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generation_is_deterministic(seed in any::<u64>(), n in 1usize..2000) {
        let spec = GrammarSpec::default();
        let a = generate_corpus(&spec, n, seed).unwrap();
        let b = generate_corpus(&spec, n, seed).unwrap();
        prop_assert_eq!(a.to_text(), b.to_text());
        let pa = generate_minimal_pairs(&spec, 20, "distractor-relative", seed).unwrap();
        let pb = generate_minimal_pairs(&spec, 20, "distractor-relative", seed).unwrap();
        prop_assert_eq!(format_minimal_pairs(&pa).unwrap(), format_minimal_pairs(&pb).unwrap());
    }

    #[test]
    fn pair_files_round_trip(seed in any::<u64>(), n in 1usize..50) {
        let spec = GrammarSpec::default();
        let pairs = generate_minimal_pairs(&spec, n, "simple-irregular", seed).unwrap();
        let text = format_minimal_pairs(&pairs).unwrap();
        let back = parse_minimal_pairs(&text, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, pairs);
    }
}
