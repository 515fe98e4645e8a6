//! Synthetic subject-verb agreement language and minimal-pair evaluation sets.

mod grammar;
mod pairs;
mod vocab;

pub use grammar::{
    generate_corpus, pack_sequences, Corpus, GrammarSpec, Lexicon, Number, Slot, Template, SENTENCE_END,
};
pub use pairs::{
    format_minimal_pairs, generate_minimal_pairs, load_minimal_pairs, parse_minimal_pairs,
    write_minimal_pairs, MinimalPair, Subtask, AGREEMENT_TASK,
};
pub use vocab::{Vocab, BOS, PAD, UNK};
