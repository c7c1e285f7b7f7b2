//! Template-grammar corpus of (truth, corrupted existing caption, features).
//!
//! Everything about an image (its caption content and its feature block) is
//! a pure function of the example's `feature_seed`; the corpus seed only
//! drives which seeds are drawn, the corruption, and the reference count.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::vocab::tokenize;
use crate::error::{Error, Result};
use crate::model::VisualFeatures;

const FEATURE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
const WORD_VECTOR_SALT: u64 = 0x5eed_cafe_f00d_0001;

#[derive(Clone, Debug, PartialEq)]
pub struct Grammar {
    pub adjectives: Vec<String>,
    pub nouns: Vec<String>,
    pub relations: Vec<String>,
}

fn owned(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

impl Default for Grammar {
    fn default() -> Self {
        Grammar {
            adjectives: owned(&[
                "red", "blue", "green", "small", "large", "wooden", "old", "white", "black",
                "shiny",
            ]),
            nouns: owned(&[
                "sandwich", "table", "dog", "cat", "man", "woman", "bench", "train", "stove",
                "plate", "cup", "bird", "horse", "car", "tree", "chair", "boat", "clock", "bowl",
                "kite", "sign", "laptop",
            ]),
            relations: owned(&["on", "near", "under", "beside", "behind", "with", "above", "by"]),
        }
    }
}

/// Probabilities of each corruption; the remainder is left clean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionMix {
    pub repetition: f64,
    pub substitution: f64,
    pub drop: f64,
}

impl Default for CorruptionMix {
    fn default() -> Self {
        CorruptionMix {
            repetition: 0.4,
            substitution: 0.3,
            drop: 0.2,
        }
    }
}

impl CorruptionMix {
    pub fn none() -> Self {
        CorruptionMix {
            repetition: 0.0,
            substitution: 0.0,
            drop: 0.0,
        }
    }

    pub fn clean(&self) -> f64 {
        (1.0 - self.repetition - self.substitution - self.drop).max(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let ps = [self.repetition, self.substitution, self.drop];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) || ps.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::Invalid(format!("invalid corruption mix {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusParams {
    pub grammar: Grammar,
    pub mix: CorruptionMix,
    pub k: usize,
    pub d_v: usize,
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams {
            grammar: Grammar::default(),
            mix: CorruptionMix::default(),
            k: 8,
            d_v: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Corruption {
    Clean,
    Repetition,
    Substitution,
    Drop,
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Corruption::Clean => "clean",
            Corruption::Repetition => "repetition",
            Corruption::Substitution => "substitution",
            Corruption::Drop => "drop",
        })
    }
}

/// The content of one synthetic image.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub adjective: String,
    pub subject: String,
    pub object: String,
    pub relation: String,
    /// `a <adj> <subject> <rel> a <object>` when false,
    /// `a <subject> <rel> a <adj> <object>` when true.
    pub adjective_on_object: bool,
}

impl Scene {
    pub fn from_seed(seed: u64, grammar: &Grammar) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adjective = grammar.adjectives[rng.random_range(0..grammar.adjectives.len())].clone();
        let s = rng.random_range(0..grammar.nouns.len());
        let mut o = rng.random_range(0..grammar.nouns.len() - 1);
        if o >= s {
            o += 1;
        }
        let relation = grammar.relations[rng.random_range(0..grammar.relations.len())].clone();
        let adjective_on_object = rng.random_bool(0.5);
        Scene {
            adjective,
            subject: grammar.nouns[s].clone(),
            object: grammar.nouns[o].clone(),
            relation,
            adjective_on_object,
        }
    }

    pub fn caption(&self) -> Vec<String> {
        let words: Vec<&str> = if self.adjective_on_object {
            vec!["a", &self.subject, &self.relation, "a", &self.adjective, &self.object]
        } else {
            vec!["a", &self.adjective, &self.subject, &self.relation, "a", &self.object]
        };
        owned(&words)
    }

    pub fn content_words(&self) -> [&str; 3] {
        [&self.adjective, &self.subject, &self.object]
    }

    pub fn nouns(&self) -> [&str; 2] {
        [&self.subject, &self.object]
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Fixed pseudo-random feature vector of a word.
pub fn word_vector(word: &str, d_v: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(word.as_bytes()) ^ WORD_VECTOR_SALT);
    (0..d_v).map(|_| rng.sample(StandardNormal)).collect()
}

/// Feature block of the image behind `feature_seed`: one vector per content
/// word plus random distractors, in shuffled order.
pub fn features_for_seed(feature_seed: u64, params: &CorpusParams) -> VisualFeatures {
    let scene = Scene::from_seed(feature_seed, &params.grammar);
    let mut rng = ChaCha8Rng::seed_from_u64(feature_seed ^ FEATURE_STREAM);
    let content = scene.content_words();
    let k = params.k.max(content.len());
    let mut rows: Vec<Vec<f64>> = content.iter().map(|w| word_vector(w, params.d_v)).collect();
    while rows.len() < k {
        rows.push((0..params.d_v).map(|_| rng.sample(StandardNormal)).collect());
    }
    rows.shuffle(&mut rng);
    VisualFeatures::new(&rows).expect("k >= 3 and d_v >= 1")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image_id: u64,
    pub feature_seed: u64,
    pub truth: Vec<String>,
    pub existing: Vec<String>,
    pub references: Vec<Vec<String>>,
    pub corruption: Corruption,
}

impl Example {
    pub fn features(&self, params: &CorpusParams) -> VisualFeatures {
        features_for_seed(self.feature_seed, params)
    }
}

fn reference_variants(truth: &[String]) -> Vec<Vec<String>> {
    let second_the = {
        let mut v = truth.to_vec();
        if let Some(p) = v.iter().rposition(|w| w == "a") {
            v[p] = "the".into();
        }
        v
    };
    let first_the = {
        let mut v = truth.to_vec();
        v[0] = "the".into();
        v
    };
    let both_the: Vec<String> = {
        let mut v = second_the.clone();
        v[0] = "the".into();
        v
    };
    vec![truth.to_vec(), second_the, first_the, both_the]
}

/// Reference set with the truth first, then `the` variants and a variant
/// without the adjective.
fn references(truth: &[String], scene: &Scene, count: usize) -> Vec<Vec<String>> {
    let mut refs = reference_variants(truth);
    let no_adj: Vec<String> = truth.iter().filter(|w| **w != scene.adjective).cloned().collect();
    refs.insert(2, no_adj);
    refs.truncate(count);
    refs
}

fn corrupt<R: Rng>(
    truth: &[String],
    scene: &Scene,
    kind: Corruption,
    grammar: &Grammar,
    rng: &mut R,
) -> Vec<String> {
    let mut out = truth.to_vec();
    match kind {
        Corruption::Clean => {}
        Corruption::Repetition => {
            let last = out.iter().rposition(|w| *w == scene.object).expect("object in caption");
            out[last] = scene.subject.clone();
        }
        Corruption::Substitution => {
            let positions: Vec<usize> = (0..out.len()).filter(|&i| out[i] != "a").collect();
            let p = positions[rng.random_range(0..positions.len())];
            let pool = if grammar.adjectives.contains(&out[p]) {
                &grammar.adjectives
            } else if grammar.nouns.contains(&out[p]) {
                &grammar.nouns
            } else {
                &grammar.relations
            };
            let mut choice = rng.random_range(0..pool.len() - 1);
            let current = pool.iter().position(|w| *w == out[p]).expect("word in pool");
            if choice >= current {
                choice += 1;
            }
            out[p] = pool[choice].clone();
        }
        Corruption::Drop => {
            if out.len() > 1 {
                let p = rng.random_range(0..out.len());
                out.remove(p);
            }
        }
    }
    out
}

fn pick_corruption<R: Rng>(mix: &CorruptionMix, rng: &mut R) -> Corruption {
    let u: f64 = rng.random();
    if u < mix.repetition {
        Corruption::Repetition
    } else if u < mix.repetition + mix.substitution {
        Corruption::Substitution
    } else if u < mix.repetition + mix.substitution + mix.drop {
        Corruption::Drop
    } else {
        Corruption::Clean
    }
}

/// Builds the example for one image given its feature seed.
pub fn make_example<R: Rng>(
    image_id: u64,
    feature_seed: u64,
    params: &CorpusParams,
    rng: &mut R,
) -> Example {
    let scene = Scene::from_seed(feature_seed, &params.grammar);
    let truth = scene.caption();
    let corruption = pick_corruption(&params.mix, rng);
    let existing = corrupt(&truth, &scene, corruption, &params.grammar, rng);
    let n_refs = rng.random_range(1..=5);
    Example {
        image_id,
        feature_seed,
        references: references(&truth, &scene, n_refs),
        truth,
        existing,
        corruption,
    }
}

pub fn generate_corpus(seed: u64, size: usize, params: &CorpusParams) -> Vec<Example> {
    generate_corpus_from(seed, size, 0, params)
}

/// As [`generate_corpus`], numbering images from `first_id`.
pub fn generate_corpus_from(
    seed: u64,
    size: usize,
    first_id: u64,
    params: &CorpusParams,
) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..size as u64)
        .map(|i| {
            let feature_seed = rng.next_u64();
            make_example(first_id + i, feature_seed, params, &mut rng)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Record {
    image_id: u64,
    truth: String,
    existing: String,
    references: Vec<String>,
    feature_seed: u64,
    corruption: Corruption,
}

impl From<&Example> for Record {
    fn from(e: &Example) -> Self {
        Record {
            image_id: e.image_id,
            truth: e.truth.join(" "),
            existing: e.existing.join(" "),
            references: e.references.iter().map(|r| r.join(" ")).collect(),
            feature_seed: e.feature_seed,
            corruption: e.corruption,
        }
    }
}

impl From<Record> for Example {
    fn from(r: Record) -> Self {
        Example {
            image_id: r.image_id,
            feature_seed: r.feature_seed,
            truth: tokenize(&r.truth),
            existing: tokenize(&r.existing),
            references: r.references.iter().map(|s| tokenize(s)).collect(),
            corruption: r.corruption,
        }
    }
}

/// One JSON object per line.
pub fn to_jsonl(examples: &[Example]) -> Result<String> {
    let mut out = String::new();
    for e in examples {
        out.push_str(&serde_json::to_string(&Record::from(e))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(to_jsonl(examples)?.as_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Invalid(format!("cannot open corpus {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)?;
        out.push(rec.into());
    }
    Ok(out)
}

/// Token-frequency and corruption-type histograms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusStats {
    pub examples: usize,
    pub token_counts: BTreeMap<String, usize>,
    pub corruption_counts: BTreeMap<Corruption, usize>,
}

impl CorpusStats {
    pub fn from_examples(examples: &[Example]) -> Self {
        let mut stats = CorpusStats {
            examples: examples.len(),
            ..Default::default()
        };
        for e in examples {
            for tok in e.truth.iter().chain(&e.existing) {
                *stats.token_counts.entry(tok.clone()).or_default() += 1;
            }
            *stats.corruption_counts.entry(e.corruption).or_default() += 1;
        }
        stats
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "examples\t{}", self.examples)?;
        writeln!(f, "# corruption")?;
        for (kind, n) in &self.corruption_counts {
            writeln!(f, "{kind}\t{n}")?;
        }
        writeln!(f, "# tokens")?;
        let mut tokens: Vec<_> = self.token_counts.iter().collect();
        tokens.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
        for (tok, n) in tokens {
            writeln!(f, "{tok}\t{n}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_corruption_keeps_truth() {
        let params = CorpusParams {
            mix: CorruptionMix::none(),
            ..CorpusParams::default()
        };
        for e in generate_corpus(3, 200, &params) {
            assert_eq!(e.existing, e.truth);
            assert_eq!(e.corruption, Corruption::Clean);
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let p = CorpusParams::default();
        let a = to_jsonl(&generate_corpus(11, 100, &p)).unwrap();
        let b = to_jsonl(&generate_corpus(11, 100, &p)).unwrap();
        assert_eq!(a, b);
        let c = to_jsonl(&generate_corpus(12, 100, &p)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn repetition_duplicates_a_noun_absent_from_truth() {
        let params = CorpusParams {
            mix: CorruptionMix {
                repetition: 1.0,
                substitution: 0.0,
                drop: 0.0,
            },
            ..CorpusParams::default()
        };
        let corpus = generate_corpus(5, 10_000, &params);
        let nouns = &params.grammar.nouns;
        let dup = |s: &[String]| -> Vec<String> {
            let mut seen = BTreeMap::<&str, usize>::new();
            for w in s.iter().filter(|w| nouns.contains(w)) {
                *seen.entry(w).or_default() += 1;
            }
            seen.into_iter().filter(|(_, c)| *c > 1).map(|(w, _)| w.to_owned()).collect()
        };
        let hits = corpus
            .iter()
            .filter(|e| {
                let d = dup(&e.existing);
                !d.is_empty() && dup(&e.truth).is_empty()
            })
            .count();
        assert!(hits as f64 / corpus.len() as f64 >= 0.99, "{hits}");
    }

    #[test]
    fn features_contain_truth_content_vectors() {
        let p = CorpusParams::default();
        for e in generate_corpus(9, 50, &p) {
            let f = e.features(&p);
            assert_eq!(f.k(), p.k);
            assert_eq!(f.dim(), p.d_v);
            let scene = Scene::from_seed(e.feature_seed, &p.grammar);
            assert_eq!(scene.caption(), e.truth);
            for noun in scene.nouns() {
                let v = word_vector(noun, p.d_v);
                assert!((0..f.k()).any(|i| f.rows().row(i) == v.as_slice()));
            }
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let p = CorpusParams::default();
        let corpus = generate_corpus(2, 20, &p);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_jsonl(&path, &corpus).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), corpus);
    }

    #[test]
    fn references_start_with_truth() {
        let p = CorpusParams::default();
        for e in generate_corpus(4, 100, &p) {
            assert!((1..=5).contains(&e.references.len()));
            assert_eq!(e.references[0], e.truth);
            assert!(!e.existing.is_empty());
        }
    }

    #[test]
    fn stats_histograms() {
        let p = CorpusParams::default();
        let corpus = generate_corpus(4, 1000, &p);
        let stats = CorpusStats::from_examples(&corpus);
        assert_eq!(stats.corruption_counts.values().sum::<usize>(), 1000);
        let rep = stats.corruption_counts[&Corruption::Repetition] as f64 / 1000.0;
        assert!((rep - 0.4).abs() < 0.05);
        assert!(stats.to_string().contains("repetition\t"));
    }
}
