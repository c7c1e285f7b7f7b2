//! Greedy decoding over a corpus, scoring, and single-caption editing.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{features_for_seed, tokenize, CorpusParams, Example, Vocab, UNK};
use crate::error::{Error, Result};
use crate::metrics::{score_corpus, MetricReport};
use crate::model::{greedy_decode, DcNet, DecodeSession, Decoded, EditNet, VisualFeatures};

/// Examples decoded per tape; bounds graph size without rebinding each time.
const CHUNK: usize = 32;

/// The models that take part in decoding: EditNet, plus DCNet when the
/// configuration fuses the two.
#[derive(Clone, Copy)]
pub struct Editor<'a> {
    pub editnet: &'a EditNet,
    pub dcnet: Option<&'a DcNet>,
}

impl<'a> Editor<'a> {
    pub fn new(editnet: &'a EditNet, dcnet: &'a DcNet) -> Self {
        Editor {
            editnet,
            dcnet: editnet.config.fuse_dcnet.then_some(dcnet),
        }
    }

    pub fn decode_one(&self, existing: &[usize], features: &VisualFeatures, max_len: usize) -> Result<Decoded> {
        let mut g = Graph::new();
        let eb = self.editnet.params.bind_frozen(&mut g)?;
        let db = match self.dcnet {
            Some(d) => Some(d.params.bind_frozen(&mut g)?),
            None => None,
        };
        let mut s = DecodeSession::new(
            &mut g,
            Some((self.editnet, &eb)),
            self.dcnet.zip(db.as_ref()),
            existing,
            features,
        )?;
        greedy_decode(&mut g, &mut s, max_len)
    }

    /// Greedy output for every example, in order.
    pub fn decode_all(
        &self,
        examples: &[Example],
        vocab: &Vocab,
        params: &CorpusParams,
        max_len: usize,
    ) -> Result<Vec<Decoded>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(CHUNK) {
            let mut g = Graph::new();
            let eb = self.editnet.params.bind_frozen(&mut g)?;
            let db = match self.dcnet {
                Some(d) => Some(d.params.bind_frozen(&mut g)?),
                None => None,
            };
            for ex in chunk {
                let existing = vocab.encode(&ex.existing);
                let feats = ex.features(params);
                let mut s = DecodeSession::new(
                    &mut g,
                    Some((self.editnet, &eb)),
                    self.dcnet.zip(db.as_ref()),
                    &existing,
                    &feats,
                )?;
                out.push(greedy_decode(&mut g, &mut s, max_len)?);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub model: MetricReport,
    pub identity: MetricReport,
    pub mean_copy_gate: f64,
}

impl EvalReport {
    pub fn tsv(&self) -> String {
        let mut s = self.model.tsv("model.");
        s.push_str(&self.identity.tsv("identity."));
        s.push_str(&format!("model.copy_gate\t{:.6}\n", self.mean_copy_gate));
        s
    }
}

fn references(examples: &[Example]) -> Vec<Vec<Vec<String>>> {
    examples.iter().map(|e| e.references.clone()).collect()
}

/// Scores the edited captions and the unedited ones against the references.
/// Document frequencies come from the evaluated examples' references.
pub fn evaluate(
    editor: &Editor<'_>,
    examples: &[Example],
    vocab: &Vocab,
    params: &CorpusParams,
    max_len: usize,
) -> Result<(EvalReport, Vec<Vec<String>>)> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation corpus"));
    }
    let decoded = editor.decode_all(examples, vocab, params, max_len)?;
    let hyps: Vec<Vec<String>> = decoded.iter().map(|d| vocab.decode(&d.tokens)).collect();
    let refs = references(examples);
    let existing: Vec<Vec<String>> = examples.iter().map(|e| e.existing.clone()).collect();
    let report = EvalReport {
        examples: examples.len(),
        model: score_corpus(&hyps, &refs)?,
        identity: score_corpus(&existing, &refs)?,
        mean_copy_gate: decoded.iter().map(Decoded::mean_copy_gate).sum::<f64>() / decoded.len() as f64,
    };
    Ok((report, hyps))
}

#[derive(Clone, Debug)]
pub struct EditResult {
    pub input: Vec<String>,
    pub unknown: usize,
    pub output: Vec<String>,
    pub decoded: Decoded,
}

/// Edits free text against the image generated from `feature_seed`.
pub fn edit_caption(
    editor: &Editor<'_>,
    vocab: &Vocab,
    text: &str,
    feature_seed: u64,
    params: &CorpusParams,
    max_len: usize,
) -> Result<EditResult> {
    let input = tokenize(text);
    if input.is_empty() {
        return Err(Error::Invalid("caption has no tokens".into()));
    }
    let ids = vocab.encode(&input);
    let unknown = ids.iter().filter(|&&i| i == UNK).count();
    let feats = features_for_seed(feature_seed, params);
    let decoded = editor.decode_one(&ids, &feats, max_len)?;
    Ok(EditResult {
        output: vocab.decode(&decoded.tokens),
        input,
        unknown,
        decoded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_corpus;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Vec<Example>, Vocab, CorpusParams, EditNet, DcNet) {
        let params = CorpusParams {
            k: 3,
            d_v: 4,
            ..CorpusParams::default()
        };
        let ex = generate_corpus(3, 40, &params);
        let vocab = Vocab::build(ex.iter().map(|e| &e.truth).chain(ex.iter().map(|e| &e.existing)), 1);
        let cfg = ModelConfig::tiny(vocab.len());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = EditNet::new(&cfg, &mut rng).unwrap();
        let d = DcNet::new(&cfg, &mut rng).unwrap();
        (ex, vocab, params, e, d)
    }

    #[test]
    fn chunked_decoding_matches_one_at_a_time() {
        let (ex, vocab, params, e, d) = setup();
        let ed = Editor::new(&e, &d);
        let all = ed.decode_all(&ex, &vocab, &params, 6).unwrap();
        for (x, got) in ex.iter().zip(&all).step_by(7) {
            let one = ed.decode_one(&vocab.encode(&x.existing), &x.features(&params), 6).unwrap();
            assert_eq!(one.tokens, got.tokens);
        }
    }

    #[test]
    fn identity_row_scores_existing_captions() {
        let (ex, vocab, params, e, d) = setup();
        let (rep, hyps) = evaluate(&Editor::new(&e, &d), &ex, &vocab, &params, 4).unwrap();
        assert_eq!(hyps.len(), ex.len());
        let existing: Vec<Vec<String>> = ex.iter().map(|x| x.existing.clone()).collect();
        assert_eq!(rep.identity, score_corpus(&existing, &references(&ex)).unwrap());
        assert!(rep.tsv().contains("identity.CIDEr-D\t"));
    }

    #[test]
    fn edit_counts_unknown_words() {
        let (_, vocab, params, e, d) = setup();
        let r = edit_caption(&Editor::new(&e, &d), &vocab, "A zebra, on a unicorn", 5, &params, 5).unwrap();
        assert_eq!(r.unknown, 2);
        assert!(edit_caption(&Editor::new(&e, &d), &vocab, " ,", 5, &params, 5).is_err());
    }
}
