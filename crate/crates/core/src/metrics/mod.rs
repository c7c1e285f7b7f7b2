//! BLEU-1..4, ROUGE-L and CIDEr-D over token sequences.

mod bleu;
mod cider;
mod ngram;
mod report;
mod rouge;

pub use bleu::{bleu, corpus_bleu, BLEU_ORDER};
pub use cider::{cider_d, cider_d_single, CiderScores, IdfTable};
pub use ngram::NGramCounts;
pub use report::{score_corpus, score_corpus_with, MetricReport};
pub use rouge::rouge_l;
