use std::collections::{BTreeMap, HashMap};

use super::ngram::NGramCounts;
use crate::error::{Error, Result};

const ORDER: usize = 4;
const SIGMA: f64 = 6.0;

/// Document frequencies of reference n-grams, one document per image.
#[derive(Clone, Debug, PartialEq)]
pub struct IdfTable {
    df: HashMap<Vec<String>, usize>,
    images: usize,
}

impl IdfTable {
    pub fn build<S: AsRef<str>>(references: &[Vec<Vec<S>>]) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Empty("cider reference corpus"));
        }
        let mut df: HashMap<Vec<String>, usize> = HashMap::new();
        for refs in references {
            let mut seen = std::collections::HashSet::new();
            for r in refs {
                for (ngram, _) in NGramCounts::new(r, ORDER).iter() {
                    seen.insert(ngram.clone());
                }
            }
            for ngram in seen {
                *df.entry(ngram).or_default() += 1;
            }
        }
        Ok(IdfTable {
            df,
            images: references.len(),
        })
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn doc_freq(&self, ngram: &[String]) -> usize {
        self.df.get(ngram).copied().unwrap_or(0)
    }

    /// `log(images / max(1, df))`.
    pub fn idf(&self, ngram: &[String]) -> f64 {
        (self.images as f64).ln() - (self.doc_freq(ngram).max(1) as f64).ln()
    }
}

struct TfIdf {
    vec: [BTreeMap<Vec<String>, f64>; ORDER],
    norm: [f64; ORDER],
    /// Number of bigrams, the length used by the penalty.
    length: usize,
}

impl TfIdf {
    fn new<S: AsRef<str>>(tokens: &[S], idf: &IdfTable) -> Self {
        let mut vec: [BTreeMap<Vec<String>, f64>; ORDER] = Default::default();
        let mut norm = [0.0; ORDER];
        let mut length = 0;
        for (ngram, tf) in NGramCounts::new(tokens, ORDER).iter() {
            let n = ngram.len() - 1;
            let w = tf as f64 * idf.idf(ngram);
            norm[n] += w * w;
            vec[n].insert(ngram.clone(), w);
            if n == 1 {
                length += tf;
            }
        }
        TfIdf {
            vec,
            norm: norm.map(f64::sqrt),
            length,
        }
    }

    fn sim(&self, r: &TfIdf) -> [f64; ORDER] {
        let delta = self.length as f64 - r.length as f64;
        let penalty = (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
        let mut val = [0.0; ORDER];
        for n in 0..ORDER {
            for (ngram, &w) in &self.vec[n] {
                let wr = r.vec[n].get(ngram).copied().unwrap_or(0.0);
                val[n] += w.min(wr) * wr;
            }
            if self.norm[n] != 0.0 && r.norm[n] != 0.0 {
                val[n] /= self.norm[n] * r.norm[n];
            }
            val[n] *= penalty;
        }
        val
    }
}

/// CIDEr-D of one candidate against its references.
pub fn cider_d_single<S: AsRef<str>, R: AsRef<[S]>>(
    candidate: &[S],
    references: &[R],
    idf: &IdfTable,
) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Empty("cider references"));
    }
    let c = TfIdf::new(candidate, idf);
    let mut total = [0.0; ORDER];
    for r in references {
        let v = c.sim(&TfIdf::new(r.as_ref(), idf));
        for n in 0..ORDER {
            total[n] += v[n];
        }
    }
    let mean_over_n = total.iter().sum::<f64>() / ORDER as f64;
    Ok(mean_over_n / references.len() as f64 * 10.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CiderScores {
    pub per_image: Vec<f64>,
    pub mean: f64,
}

pub fn cider_d<S: AsRef<str>, R: AsRef<[S]>>(
    candidates: &[Vec<S>],
    references: &[Vec<R>],
    idf: &IdfTable,
) -> Result<CiderScores> {
    if candidates.len() != references.len() {
        return Err(Error::LengthMismatch {
            op: "cider_d",
            left: candidates.len(),
            right: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(Error::Empty("cider candidates"));
    }
    let per_image = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| cider_d_single(c, r, idf))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(CiderScores { per_image, mean })
}
