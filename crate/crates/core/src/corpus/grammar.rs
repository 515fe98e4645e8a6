use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use crate::util::{fnv1a_tokens, mix_seed, rng};
use crate::{Error, Result};

pub const SENTENCE_END: &str = ".";

/// One prefix in this many is reserved for evaluation when holdout is on.
const HOLDOUT_MODULUS: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Number {
    Singular,
    Plural,
}

impl Number {
    pub fn other(self) -> Number {
        match self {
            Number::Singular => Number::Plural,
            Number::Plural => Number::Singular,
        }
    }
}

/// Lexical entries. Paired entries are `(singular, plural)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub regular_nouns: Vec<(String, String)>,
    pub irregular_nouns: Vec<(String, String)>,
    pub verbs: Vec<(String, String)>,
    pub transitive_verbs: Vec<(String, String)>,
    pub prepositions: Vec<String>,
    pub adjectives: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub name: String,
    /// Space-separated slots, e.g. `the ADJ NOUN_SG VERB_SG .`. Upper-case
    /// slot names draw from the lexicon; anything else is a literal token.
    pub pattern: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Slot {
    Literal(String),
    Noun(Number),
    Irregular(Number),
    Verb(Number),
    TransitiveVerb(Number),
    Preposition,
    Adjective,
}

impl Slot {
    fn parse(s: &str) -> Slot {
        use Number::*;
        match s {
            "NOUN_SG" => Slot::Noun(Singular),
            "NOUN_PL" => Slot::Noun(Plural),
            "IRR_SG" => Slot::Irregular(Singular),
            "IRR_PL" => Slot::Irregular(Plural),
            "VERB_SG" => Slot::Verb(Singular),
            "VERB_PL" => Slot::Verb(Plural),
            "TVERB_SG" => Slot::TransitiveVerb(Singular),
            "TVERB_PL" => Slot::TransitiveVerb(Plural),
            "PREP" => Slot::Preposition,
            "ADJ" => Slot::Adjective,
            other => Slot::Literal(other.to_string()),
        }
    }

    fn subject_number(&self) -> Option<Number> {
        match self {
            Slot::Noun(n) | Slot::Irregular(n) => Some(*n),
            _ => None,
        }
    }
}

impl Template {
    pub fn slots(&self) -> Vec<Slot> {
        self.pattern.split_whitespace().map(Slot::parse).collect()
    }

    /// Number of the first noun slot (the sentence subject).
    pub fn subject_number(&self) -> Option<Number> {
        self.slots().iter().find_map(Slot::subject_number)
    }
}

/// Synthetic agreement grammar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarSpec {
    pub seed: u64,
    /// Reserve a deterministic subset of verb prefixes for evaluation only.
    #[serde(default)]
    pub holdout: bool,
    pub lexicon: Lexicon,
    pub templates: Vec<Template>,
}

fn pairs(xs: &[(&str, &str)]) -> Vec<(String, String)> {
    xs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
}

fn words(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for GrammarSpec {
    fn default() -> Self {
        let lexicon = Lexicon {
            regular_nouns: pairs(&[
                ("cat", "cats"),
                ("dog", "dogs"),
                ("key", "keys"),
                ("bird", "birds"),
                ("girl", "girls"),
                ("boy", "boys"),
                ("car", "cars"),
                ("book", "books"),
                ("tree", "trees"),
                ("farmer", "farmers"),
                ("doctor", "doctors"),
                ("teacher", "teachers"),
            ]),
            irregular_nouns: pairs(&[
                ("man", "men"),
                ("woman", "women"),
                ("child", "children"),
                ("mouse", "mice"),
                ("person", "people"),
                ("foot", "feet"),
                ("goose", "geese"),
                ("tooth", "teeth"),
            ]),
            verbs: pairs(&[
                ("sleeps", "sleep"),
                ("runs", "run"),
                ("laughs", "laugh"),
                ("falls", "fall"),
                ("waits", "wait"),
                ("shines", "shine"),
                ("works", "work"),
                ("sings", "sing"),
            ]),
            transitive_verbs: pairs(&[
                ("sees", "see"),
                ("likes", "like"),
                ("chases", "chase"),
                ("finds", "find"),
                ("helps", "help"),
                ("knows", "know"),
            ]),
            prepositions: words(&["near", "behind", "beside", "above", "under"]),
            adjectives: words(&["big", "small", "old", "young", "red", "quiet"]),
        };
        let t = |name: &str, pattern: &str, weight: f64| Template {
            name: name.into(),
            pattern: pattern.into(),
            weight,
        };
        GrammarSpec {
            seed: 0,
            holdout: true,
            lexicon,
            templates: vec![
                t("simple-regular-sg", "the ADJ NOUN_SG VERB_SG .", 0.15),
                t("simple-regular-pl", "the ADJ NOUN_PL VERB_PL .", 0.15),
                t("simple-irregular-sg", "the ADJ IRR_SG VERB_SG .", 0.10),
                t("simple-irregular-pl", "the ADJ IRR_PL VERB_PL .", 0.10),
                t("distractor-relational-sg", "the NOUN_SG PREP the NOUN_PL VERB_SG .", 0.125),
                t("distractor-relational-pl", "the NOUN_PL PREP the NOUN_SG VERB_PL .", 0.125),
                t("distractor-relative-sg", "the NOUN_SG that TVERB_SG the NOUN_PL VERB_SG .", 0.125),
                t("distractor-relative-pl", "the NOUN_PL that TVERB_PL the NOUN_SG VERB_PL .", 0.125),
            ],
        }
    }
}

impl GrammarSpec {
    /// Checks weights, lexicon coverage and lexeme uniqueness.
    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::Config("grammar has no templates".into()));
        }
        let mut total = 0.0;
        for t in &self.templates {
            if !(t.weight >= 0.0) || !t.weight.is_finite() {
                return Err(Error::Config(format!("template {} has invalid weight {}", t.name, t.weight)));
            }
            total += t.weight;
            let slots = t.slots();
            if slots.last() != Some(&Slot::Literal(SENTENCE_END.into())) {
                return Err(Error::Config(format!("template {} must end with `{SENTENCE_END}`", t.name)));
            }
            if slots[..slots.len() - 1].contains(&Slot::Literal(SENTENCE_END.into())) {
                return Err(Error::Config(format!(
                    "template {} uses `{SENTENCE_END}` before its end",
                    t.name
                )));
            }
            for s in &slots {
                let (empty, cat) = match s {
                    Slot::Noun(_) => (self.lexicon.regular_nouns.is_empty(), "regular_nouns"),
                    Slot::Irregular(_) => (self.lexicon.irregular_nouns.is_empty(), "irregular_nouns"),
                    Slot::Verb(_) => (self.lexicon.verbs.is_empty(), "verbs"),
                    Slot::TransitiveVerb(_) => (self.lexicon.transitive_verbs.is_empty(), "transitive_verbs"),
                    Slot::Preposition => (self.lexicon.prepositions.is_empty(), "prepositions"),
                    Slot::Adjective => (self.lexicon.adjectives.is_empty(), "adjectives"),
                    Slot::Literal(_) => (false, ""),
                };
                if empty {
                    return Err(Error::Config(format!(
                        "empty lexicon category `{cat}` used by template {}",
                        t.name
                    )));
                }
            }
        }
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("template weights sum to {total}, expected 1")));
        }
        let lex = &self.lexicon;
        for (s, p) in lex.verbs.iter().chain(&lex.transitive_verbs) {
            if s == p {
                return Err(Error::Config(format!("verb {s:?} has identical singular and plural forms")));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for w in self.lexemes() {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::Config(format!("lexeme {w:?} is not a single token")));
            }
            if !seen.insert(w) {
                return Err(Error::Config(format!("lexeme {w:?} appears more than once")));
            }
        }
        Ok(())
    }

    fn lexemes(&self) -> impl Iterator<Item = &str> {
        let lex = &self.lexicon;
        let paired = lex
            .regular_nouns
            .iter()
            .chain(&lex.irregular_nouns)
            .chain(&lex.verbs)
            .chain(&lex.transitive_verbs)
            .flat_map(|(a, b)| [a.as_str(), b.as_str()]);
        paired
            .chain(lex.prepositions.iter().map(String::as_str))
            .chain(lex.adjectives.iter().map(String::as_str))
    }

    /// Deterministic vocabulary: specials, sentence end, function words,
    /// template literals, then the lexicon in declaration order.
    pub fn vocab(&self) -> Vocab {
        let mut v = Vocab::new();
        v.insert(SENTENCE_END);
        v.insert("the");
        v.insert("that");
        for t in &self.templates {
            for s in t.slots() {
                if let Slot::Literal(w) = s {
                    v.insert(&w);
                }
            }
        }
        for w in self.lexemes() {
            v.insert(w);
        }
        v
    }

    /// Whether a verb prefix is reserved for evaluation.
    pub fn is_held_out(&self, prefix: &[u32]) -> bool {
        fnv1a_tokens(prefix) % HOLDOUT_MODULUS == 0
    }

    pub(crate) fn pick<'a>(&self, xs: &'a [(String, String)], n: Number, rng: &mut impl Rng) -> &'a str {
        let (s, p) = &xs[rng.random_range(0..xs.len())];
        match n {
            Number::Singular => s,
            Number::Plural => p,
        }
    }

    /// Instantiates one template; returns the tokens and the index of the
    /// last intransitive-verb slot (the main verb), if any.
    fn instantiate(&self, slots: &[Slot], vocab: &Vocab, rng: &mut impl Rng) -> (Vec<u32>, Option<usize>) {
        let lex = &self.lexicon;
        let mut out = Vec::with_capacity(slots.len());
        let mut main_verb = None;
        for (i, slot) in slots.iter().enumerate() {
            let word: &str = match slot {
                Slot::Literal(w) => w,
                Slot::Noun(n) => self.pick(&lex.regular_nouns, *n, rng),
                Slot::Irregular(n) => self.pick(&lex.irregular_nouns, *n, rng),
                Slot::Verb(n) => {
                    main_verb = Some(i);
                    self.pick(&lex.verbs, *n, rng)
                }
                Slot::TransitiveVerb(n) => self.pick(&lex.transitive_verbs, *n, rng),
                Slot::Preposition => &lex.prepositions[rng.random_range(0..lex.prepositions.len())],
                Slot::Adjective => &lex.adjectives[rng.random_range(0..lex.adjectives.len())],
            };
            out.push(vocab.id(word).expect("vocab covers every lexeme"));
        }
        (out, main_verb)
    }
}

/// A generated token stream; sentences are terminated by `eos`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub tokens: Vec<u32>,
    pub eos: u32,
}

impl Corpus {
    pub fn sentences(&self) -> impl Iterator<Item = &[u32]> {
        let eos = self.eos;
        self.tokens.split_inclusive(move |&t| t == eos)
    }

    /// One sentence per line, space-separated ids.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.tokens.len() * 3);
        for sent in self.sentences() {
            let line: Vec<String> = sent.iter().map(u32::to_string).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str, eos: u32) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let before = tokens.len();
            for w in line.split_whitespace() {
                let id = w
                    .parse::<u32>()
                    .map_err(|_| Error::Input(format!("corpus line {}: bad token id {w:?}", n + 1)))?;
                tokens.push(id);
            }
            if tokens.len() > before && tokens.last() != Some(&eos) {
                return Err(Error::Input(format!("corpus line {}: sentence not terminated", n + 1)));
            }
        }
        Ok(Corpus { tokens, eos })
    }
}

/// Samples sentences until at least `n_tokens` tokens are emitted.
pub fn generate_corpus(spec: &GrammarSpec, n_tokens: usize, seed: u64) -> Result<Corpus> {
    if n_tokens == 0 {
        return Err(Error::Config("n_tokens must be positive".into()));
    }
    spec.validate()?;
    let vocab = spec.vocab();
    let slots: Vec<Vec<Slot>> = spec.templates.iter().map(Template::slots).collect();
    let weights = WeightedIndex::new(spec.templates.iter().map(|t| t.weight))
        .map_err(|e| Error::Config(format!("template weights: {e}")))?;
    let mut rng = rng(mix_seed(spec.seed, seed));
    let mut tokens = Vec::with_capacity(n_tokens + 16);
    let mut rejected_in_row = 0usize;
    while tokens.len() < n_tokens {
        let k = weights.sample(&mut rng);
        let (sent, verb) = spec.instantiate(&slots[k], &vocab, &mut rng);
        if spec.holdout {
            if let Some(v) = verb {
                if spec.is_held_out(&sent[..v]) {
                    rejected_in_row += 1;
                    if rejected_in_row > 10_000 {
                        return Err(Error::Config("holdout rejects every sentence".into()));
                    }
                    continue;
                }
            }
        }
        rejected_in_row = 0;
        tokens.extend_from_slice(&sent);
    }
    Ok(Corpus {
        tokens,
        eos: vocab.id(SENTENCE_END).unwrap(),
    })
}

/// Packs whole sentences into fixed-length sequences, each starting with
/// `bos` and right-padded with `pad`.
pub fn pack_sequences(corpus: &Corpus, context_len: usize, bos: u32, pad: u32) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::new();
    let mut cur = vec![bos];
    for sent in corpus.sentences() {
        if sent.len() + 1 > context_len {
            return Err(Error::Config(format!(
                "sentence of {} tokens does not fit context {context_len}",
                sent.len()
            )));
        }
        if cur.len() + sent.len() > context_len {
            cur.resize(context_len, pad);
            out.push(std::mem::replace(&mut cur, vec![bos]));
        }
        cur.extend_from_slice(sent);
    }
    if cur.len() > 1 {
        cur.resize(context_len, pad);
        out.push(cur);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_validates() {
        GrammarSpec::default().validate().unwrap();
        let v = GrammarSpec::default().vocab();
        assert_eq!(v.id("."), Some(3));
        assert!(v.id("children").is_some());
    }

    #[test]
    fn empty_category_is_config_error() {
        let mut spec = GrammarSpec::default();
        spec.lexicon.irregular_nouns.clear();
        let err = generate_corpus(&spec, 10, 0).unwrap_err();
        assert!(err.to_string().contains("irregular_nouns"), "{err}");
    }

    #[test]
    fn bad_weights_rejected() {
        let mut spec = GrammarSpec::default();
        spec.templates[0].weight = 0.5;
        assert!(spec.validate().is_err());
        spec.templates[0].weight = -0.15;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn packing_keeps_sentences_whole() {
        let spec = GrammarSpec::default();
        let c = generate_corpus(&spec, 2000, 3).unwrap();
        let seqs = pack_sequences(&c, 32, 0, 1).unwrap();
        let mut rebuilt = Vec::new();
        for s in &seqs {
            assert_eq!(s.len(), 32);
            assert_eq!(s[0], 0);
            let body: Vec<u32> = s[1..].iter().copied().filter(|&t| t != 1).collect();
            assert_eq!(body.last(), Some(&c.eos));
            rebuilt.extend(body);
        }
        assert_eq!(rebuilt, c.tokens);
    }

    #[test]
    fn text_round_trip() {
        let c = generate_corpus(&GrammarSpec::default(), 500, 1).unwrap();
        assert_eq!(Corpus::from_text(&c.to_text(), c.eos).unwrap(), c);
    }
}
