use super::ngram::NGramCounts;
use crate::error::{Error, Result};

pub const BLEU_ORDER: usize = 4;

/// Clipped match and candidate n-gram totals per order, plus lengths.
#[derive(Clone, Debug, Default, PartialEq)]
struct BleuStats {
    matches: [usize; BLEU_ORDER],
    totals: [usize; BLEU_ORDER],
    cand_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn add(&mut self, other: &BleuStats) {
        for n in 0..BLEU_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.cand_len += other.cand_len;
        self.ref_len += other.ref_len;
    }

    fn scores(&self) -> [f64; BLEU_ORDER] {
        let mut out = [0.0; BLEU_ORDER];
        if self.cand_len == 0 {
            return out;
        }
        let bp = if self.cand_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        } else {
            1.0
        };
        let mut log_sum = 0.0;
        for n in 0..BLEU_ORDER {
            if self.matches[n] == 0 {
                break;
            }
            log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln();
            out[n] = bp * (log_sum / (n + 1) as f64).exp();
        }
        out
    }
}

fn sentence_stats<S: AsRef<str>, R: AsRef<[S]>>(candidate: &[S], references: &[R]) -> Result<BleuStats> {
    if references.is_empty() {
        return Err(Error::Empty("bleu references"));
    }
    let cand = NGramCounts::new(candidate, BLEU_ORDER);
    let refs: Vec<NGramCounts> = references
        .iter()
        .map(|r| NGramCounts::new(r.as_ref(), BLEU_ORDER))
        .collect();
    let mut s = BleuStats {
        cand_len: candidate.len(),
        ..Default::default()
    };
    for (ngram, count) in cand.iter() {
        let max_ref = refs.iter().map(|r| r.get(ngram)).max().unwrap_or(0);
        s.matches[ngram.len() - 1] += count.min(max_ref);
    }
    for n in 0..BLEU_ORDER {
        s.totals[n] = candidate.len().saturating_sub(n);
    }
    // closest reference length, the shorter one on ties
    s.ref_len = references
        .iter()
        .map(|r| r.as_ref().len())
        .min_by_key(|&l| (l.abs_diff(candidate.len()), l))
        .expect("non-empty");
    Ok(s)
}

/// BLEU-1..4 of one candidate against its references.
pub fn bleu<S: AsRef<str>, R: AsRef<[S]>>(candidate: &[S], references: &[R]) -> Result<[f64; BLEU_ORDER]> {
    Ok(sentence_stats(candidate, references)?.scores())
}

/// Corpus BLEU: clipped counts and lengths are summed before combining.
pub fn corpus_bleu<S: AsRef<str>, R: AsRef<[S]>>(
    candidates: &[Vec<S>],
    references: &[Vec<R>],
) -> Result<[f64; BLEU_ORDER]> {
    if candidates.len() != references.len() {
        return Err(Error::LengthMismatch {
            op: "corpus_bleu",
            left: candidates.len(),
            right: references.len(),
        });
    }
    let mut total = BleuStats::default();
    for (c, r) in candidates.iter().zip(references) {
        total.add(&sentence_stats(c, r)?);
    }
    Ok(total.scores())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn perfect_match() {
        let c = t("a red cat on a mat");
        assert_eq!(bleu(&c, &[c.clone()]).unwrap(), [1.0; 4]);
    }

    #[test]
    fn repeated_word_is_clipped() {
        let b = bleu(&t("the the the"), &[t("the cat")]).unwrap();
        assert!((b[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn short_candidate_is_penalised() {
        let b = bleu(&t("a cat"), &[t("a cat on the mat")]).unwrap();
        assert!((b[0] - (1.0f64 - 5.0 / 2.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn empty_candidate_scores_zero_and_no_refs_is_error() {
        let empty: Vec<&str> = vec![];
        assert_eq!(bleu(&empty, &[t("a cat")]).unwrap(), [0.0; 4]);
        let none: Vec<Vec<&str>> = vec![];
        assert!(bleu(&t("a"), &none).is_err());
    }
}
