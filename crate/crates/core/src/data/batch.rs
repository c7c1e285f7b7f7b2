use super::corpus::{CorpusParams, Example};
use super::vocab::{Vocab, END, PAD, START};
use crate::model::VisualFeatures;

/// A group of examples padded to a common length.
///
/// Rows are sorted by existing-caption length, longest first. Truth rows are
/// framed as `<start> w_1 .. w_T <end>`; existing rows carry the raw tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub existing: Vec<Vec<usize>>,
    pub existing_lengths: Vec<usize>,
    pub truth: Vec<Vec<usize>>,
    pub truth_lengths: Vec<usize>,
    pub features: Vec<VisualFeatures>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Unpadded existing caption of row `i`.
    pub fn existing_ids(&self, i: usize) -> &[usize] {
        &self.existing[i][..self.existing_lengths[i]]
    }

    /// Unpadded framed truth of row `i`.
    pub fn truth_ids(&self, i: usize) -> &[usize] {
        &self.truth[i][..self.truth_lengths[i]]
    }
}

/// `<start> ids <end>`.
pub fn frame(ids: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(ids.len() + 2);
    out.push(START);
    out.extend_from_slice(ids);
    out.push(END);
    out
}

fn pad_to(mut ids: Vec<usize>, len: usize) -> Vec<usize> {
    ids.resize(len, PAD);
    ids
}

/// Splits `examples` (in the given order) into consecutive batches.
pub fn make_batches(
    examples: &[Example],
    order: &[usize],
    batch_size: usize,
    vocab: &Vocab,
    params: &CorpusParams,
) -> Vec<Batch> {
    let batch_size = batch_size.max(1);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let mut idx = chunk.to_vec();
            idx.sort_by_key(|&i| std::cmp::Reverse(examples[i].existing.len()));
            let existing: Vec<Vec<usize>> =
                idx.iter().map(|&i| vocab.encode(&examples[i].existing)).collect();
            let truth: Vec<Vec<usize>> =
                idx.iter().map(|&i| frame(&vocab.encode(&examples[i].truth))).collect();
            let existing_lengths: Vec<usize> = existing.iter().map(Vec::len).collect();
            let truth_lengths: Vec<usize> = truth.iter().map(Vec::len).collect();
            let ex_max = existing_lengths.iter().copied().max().unwrap_or(0);
            let tr_max = truth_lengths.iter().copied().max().unwrap_or(0);
            Batch {
                features: idx.iter().map(|&i| examples[i].features(params)).collect(),
                indices: idx,
                existing: existing.into_iter().map(|r| pad_to(r, ex_max)).collect(),
                existing_lengths,
                truth: truth.into_iter().map(|r| pad_to(r, tr_max)).collect(),
                truth_lengths,
            }
        })
        .collect()
}
