use serde_json::json;
use xct_core::corpus::{format_minimal_pairs, generate_corpus, generate_minimal_pairs, Subtask};

use super::{pairs_file, settings, Session, EVAL_CORPUS, EXTRACT_CORPUS, LM_CORPUS, VOCAB_FILE};
use crate::error::CliResult;
use crate::manifest::StepSpec;

/// Corpus stream ids, mixed with the grammar seed.
const LM_STREAM: u64 = 1;
const EXTRACT_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

pub fn gen_corpus(s: &Session) -> CliResult<()> {
    let g = &s.config.grammar;
    let spec = s.config.grammar_spec();
    let step = StepSpec {
        command: "gen-corpus",
        key: None,
        inputs: Vec::new(),
        settings: json!({
            "grammar": settings(&spec),
            "lm_tokens": g.lm_tokens,
            "extract_tokens": g.extract_tokens,
            "eval_tokens": g.eval_tokens,
        }),
        seeds: vec![spec.seed],
    };
    s.step(step, || {
        let vocab = spec.vocab();
        let mut out = vec![s.write(VOCAB_FILE, vocab.to_tsv().as_bytes())?];
        for (rel, n, stream) in [
            (LM_CORPUS, g.lm_tokens, LM_STREAM),
            (EXTRACT_CORPUS, g.extract_tokens, EXTRACT_STREAM),
            (EVAL_CORPUS, g.eval_tokens, EVAL_STREAM),
        ] {
            let corpus = generate_corpus(&spec, n, stream)?;
            out.push(s.write(rel, corpus.to_text().as_bytes())?);
        }
        Ok(out)
    })
}

pub fn gen_pairs(s: &Session) -> CliResult<()> {
    let g = &s.config.grammar;
    let spec = s.config.grammar_spec();
    let step = StepSpec {
        command: "gen-pairs",
        key: None,
        inputs: Vec::new(),
        settings: json!({
            "grammar": settings(&spec),
            "pairs_per_subtask": g.pairs_per_subtask,
        }),
        seeds: vec![g.pair_seed],
    };
    s.step(step, || {
        let mut out = Vec::new();
        for (k, t) in Subtask::ALL.into_iter().enumerate() {
            let pairs = generate_minimal_pairs(&spec, g.pairs_per_subtask, t.name(), g.pair_seed + k as u64)?;
            out.push(s.write(&pairs_file(t), format_minimal_pairs(&pairs)?.as_bytes())?);
        }
        Ok(out)
    })
}
