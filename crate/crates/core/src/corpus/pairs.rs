use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use super::grammar::{GrammarSpec, Number};
use crate::util::{mix_seed, rng, write_atomic};
use crate::{Error, Result};

pub const AGREEMENT_TASK: &str = "agreement";

/// A shared prefix plus one grammatical and one ungrammatical single-token
/// completion. `prefix` excludes the BOS token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinimalPair {
    pub prefix: Vec<u32>,
    pub correct: u32,
    pub wrong: u32,
    pub task: String,
    pub subtask: String,
    pub slice: String,
}

impl MinimalPair {
    /// Model input: `bos` followed by the prefix. The completion is predicted
    /// at the last position.
    pub fn model_input(&self, bos: u32) -> Vec<u32> {
        let mut v = Vec::with_capacity(self.prefix.len() + 1);
        v.push(bos);
        v.extend_from_slice(&self.prefix);
        v
    }

    /// The same pair with completions exchanged.
    pub fn swapped(&self) -> MinimalPair {
        MinimalPair {
            correct: self.wrong,
            wrong: self.correct,
            ..self.clone()
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.prefix.is_empty() {
            return Err("empty prefix".into());
        }
        if self.correct == self.wrong {
            return Err(format!("correct and wrong completions are both {}", self.correct));
        }
        for (name, v) in [("task", &self.task), ("subtask", &self.subtask), ("slice", &self.slice)] {
            if v.contains(['\t', '\n', '\r']) {
                return Err(format!("{name} contains a tab or newline"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Subtask {
    SimpleRegular,
    SimpleIrregular,
    DistractorRelational,
    DistractorRelative,
}

impl Subtask {
    pub const ALL: [Subtask; 4] = [
        Subtask::SimpleRegular,
        Subtask::SimpleIrregular,
        Subtask::DistractorRelational,
        Subtask::DistractorRelative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subtask::SimpleRegular => "simple-regular",
            Subtask::SimpleIrregular => "simple-irregular",
            Subtask::DistractorRelational => "distractor-relational",
            Subtask::DistractorRelative => "distractor-relative",
        }
    }
}

impl fmt::Display for Subtask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subtask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Subtask::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| {
            let valid: Vec<_> = Subtask::ALL.iter().map(|t| t.name()).collect();
            Error::Config(format!("unknown subtask {s:?}; valid subtasks: {}", valid.join(", ")))
        })
    }
}

/// Generates `n` agreement pairs, alternating singular and plural subjects
/// (singular first). With `spec.holdout`, only held-out prefixes are used.
pub fn generate_minimal_pairs(spec: &GrammarSpec, n: usize, subtask: &str, seed: u64) -> Result<Vec<MinimalPair>> {
    let subtask: Subtask = subtask.parse()?;
    spec.validate()?;
    let lex = &spec.lexicon;
    let need = |empty: bool, cat: &str| {
        if empty {
            Err(Error::Config(format!("subtask {subtask} needs a non-empty `{cat}` lexicon")))
        } else {
            Ok(())
        }
    };
    need(lex.verbs.is_empty(), "verbs")?;
    match subtask {
        Subtask::SimpleRegular => need(lex.regular_nouns.is_empty(), "regular_nouns")?,
        Subtask::SimpleIrregular => need(lex.irregular_nouns.is_empty(), "irregular_nouns")?,
        Subtask::DistractorRelational => {
            need(lex.regular_nouns.is_empty(), "regular_nouns")?;
            need(lex.prepositions.is_empty(), "prepositions")?;
        }
        Subtask::DistractorRelative => {
            need(lex.regular_nouns.is_empty(), "regular_nouns")?;
            need(lex.transitive_verbs.is_empty(), "transitive_verbs")?;
        }
    }

    let vocab = spec.vocab();
    let id = |w: &str| vocab.id(w).expect("vocab covers lexicon");
    let mut rng = rng(mix_seed(mix_seed(spec.seed, seed), subtask as u64 + 1));
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let number = if k % 2 == 0 { Number::Singular } else { Number::Plural };
        let mut attempts = 0usize;
        let prefix = loop {
            let prefix = sample_prefix(spec, subtask, number, &mut rng)
                .iter()
                .map(|w| id(w))
                .collect::<Vec<_>>();
            if !spec.holdout || spec.is_held_out(&prefix) {
                break prefix;
            }
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::Config(format!("no held-out prefixes available for {subtask}")));
            }
        };
        let (sg, pl) = &lex.verbs[rng.random_range(0..lex.verbs.len())];
        let (correct, wrong) = match number {
            Number::Singular => (id(sg), id(pl)),
            Number::Plural => (id(pl), id(sg)),
        };
        out.push(MinimalPair {
            prefix,
            correct,
            wrong,
            task: AGREEMENT_TASK.into(),
            subtask: subtask.name().into(),
            slice: subtask.name().into(),
        });
    }
    Ok(out)
}

fn sample_prefix<'a>(spec: &'a GrammarSpec, subtask: Subtask, number: Number, rng: &mut impl Rng) -> Vec<&'a str> {
    let lex = &spec.lexicon;
    let adj = |rng: &mut dyn rand::RngCore| -> Option<&'a str> {
        if lex.adjectives.is_empty() {
            None
        } else {
            Some(lex.adjectives[rng.random_range(0..lex.adjectives.len())].as_str())
        }
    };
    match subtask {
        Subtask::SimpleRegular | Subtask::SimpleIrregular => {
            let nouns = if subtask == Subtask::SimpleRegular {
                &lex.regular_nouns
            } else {
                &lex.irregular_nouns
            };
            let mut v = vec!["the"];
            v.extend(adj(rng));
            v.push(spec.pick(nouns, number, rng));
            v
        }
        Subtask::DistractorRelational => {
            let head = spec.pick(&lex.regular_nouns, number, rng);
            let prep = lex.prepositions[rng.random_range(0..lex.prepositions.len())].as_str();
            let distractor = spec.pick(&lex.regular_nouns, number.other(), rng);
            vec!["the", head, prep, "the", distractor]
        }
        Subtask::DistractorRelative => {
            let head = spec.pick(&lex.regular_nouns, number, rng);
            let verb = spec.pick(&lex.transitive_verbs, number, rng);
            let distractor = spec.pick(&lex.regular_nouns, number.other(), rng);
            vec!["the", head, "that", verb, "the", distractor]
        }
    }
}

/// Serializes pairs in the tab-separated minimal-pair line format.
pub fn format_minimal_pairs(pairs: &[MinimalPair]) -> Result<String> {
    let mut s = String::new();
    for (i, p) in pairs.iter().enumerate() {
        p.check().map_err(|m| Error::Input(format!("pair {i}: {m}")))?;
        let prefix: Vec<String> = p.prefix.iter().map(u32::to_string).collect();
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            prefix.join(" "),
            p.correct,
            p.wrong,
            p.task,
            p.subtask,
            p.slice
        ));
    }
    Ok(s)
}

pub fn write_minimal_pairs(path: &Path, pairs: &[MinimalPair]) -> Result<()> {
    write_atomic(path, format_minimal_pairs(pairs)?.as_bytes())
}

pub fn parse_minimal_pairs(text: &str, path: &Path) -> Result<Vec<MinimalPair>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let err = |message: String| Error::Validation {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(err(format!("expected 6 tab-separated fields, found {}", fields.len())));
        }
        let prefix = fields[0]
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(|w| w.parse::<u32>().map_err(|_| err(format!("bad prefix token {w:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let single = |name: &str, s: &str| -> Result<u32> {
            let parts: Vec<&str> = s.split_whitespace().collect();
            match parts.as_slice() {
                [one] => one.parse().map_err(|_| err(format!("{name} completion {s:?} is not a token id"))),
                [] => Err(err(format!("{name} completion is empty"))),
                _ => Err(err(format!("{name} completion {s:?} spans {} tokens; must be a single token", parts.len()))),
            }
        };
        let pair = MinimalPair {
            prefix,
            correct: single("correct", fields[1])?,
            wrong: single("wrong", fields[2])?,
            task: fields[3].to_string(),
            subtask: fields[4].to_string(),
            slice: fields[5].to_string(),
        };
        pair.check().map_err(err)?;
        out.push(pair);
    }
    Ok(out)
}

pub fn load_minimal_pairs(path: &Path) -> Result<Vec<MinimalPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_minimal_pairs(&text, path)
}
