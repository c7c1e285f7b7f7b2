//! Synthetic corpus, vocabulary and batching.

mod batch;
mod corpus;
mod vocab;

pub use batch::{frame, make_batches, Batch};
pub use corpus::{
    features_for_seed, generate_corpus, generate_corpus_from, make_example, read_jsonl,
    to_jsonl, word_vector, write_jsonl, Corruption, CorpusParams, CorpusStats, CorruptionMix,
    Example, Grammar, Scene,
};
pub use vocab::{tokenize, Vocab, END, PAD, SPECIAL_TOKENS, START, UNK};
