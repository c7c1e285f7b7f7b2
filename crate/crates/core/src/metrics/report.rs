use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{cider_d, corpus_bleu, rouge_l, IdfTable};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider_d: f64,
}

impl MetricReport {
    /// `metric<TAB>value` lines, each metric name prefixed by `label`.
    pub fn tsv(&self, label: &str) -> String {
        let mut out = String::new();
        for (i, b) in self.bleu.iter().enumerate() {
            let _ = writeln!(out, "{label}BLEU-{}\t{b:.6}", i + 1);
        }
        let _ = writeln!(out, "{label}ROUGE-L\t{:.6}", self.rouge_l);
        let _ = writeln!(out, "{label}CIDEr-D\t{:.6}", self.cider_d);
        out
    }
}

/// Corpus BLEU, mean sentence ROUGE-L, and mean CIDEr-D with document
/// frequencies taken from `references` themselves.
pub fn score_corpus(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<MetricReport> {
    let idf = IdfTable::build(references)?;
    score_corpus_with(candidates, references, &idf)
}

pub fn score_corpus_with(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    idf: &IdfTable,
) -> Result<MetricReport> {
    let bleu = corpus_bleu(candidates, references)?;
    let mut rouge = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        rouge += rouge_l(c, r)?;
    }
    let cider = cider_d(candidates, references, idf)?;
    Ok(MetricReport {
        bleu,
        rouge_l: rouge / candidates.len() as f64,
        cider_d: cider.mean,
    })
}
