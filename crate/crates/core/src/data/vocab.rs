use std::collections::{BTreeMap, HashMap};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;

pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Lowercases, strips punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_count: usize,
}

impl Vocab {
    /// Keeps tokens seen at least `min_count` times; the rest map to `<unk>`.
    /// Kept tokens are ordered alphabetically after the four specials.
    pub fn build<'a, I, S>(sentences: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a S>,
        S: AsRef<[String]> + 'a + ?Sized,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in sentences {
            for tok in s.as_ref() {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            counts
                .into_iter()
                .filter(|(t, c)| *c >= min_count && !SPECIAL_TOKENS.contains(t))
                .map(|(t, _)| t.to_owned()),
        );
        Vocab::from_tokens(tokens, min_count)
    }

    /// Rebuilds from a full token list whose first four entries are the
    /// specials.
    pub fn from_tokens(tokens: Vec<String>, min_count: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            tokens,
            index,
            min_count,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    /// Token strings for `ids`, stopping at `<end>` and skipping padding.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != END)
            .filter(|&&i| i != PAD && i != START)
            .map(|&i| self.token(i).to_owned())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(text: &str) -> Vec<String> {
        tokenize(text)
    }

    #[test]
    fn tokenize_lowercases_and_strips() {
        assert_eq!(tokenize("A Sandwich, on a table!"), vec!["a", "sandwich", "on", "a", "table"]);
    }

    #[test]
    fn rare_tokens_become_unk() {
        let corpus = vec![s("a cat a dog"), s("a cat"), s("a cat dog")];
        let v = Vocab::build(&corpus, 3);
        assert_eq!(v.id("dog"), UNK);
        assert_ne!(v.id("cat"), UNK);
        assert_eq!(v.token(PAD), "<pad>");
        assert_eq!(v.id("<end>"), END);
    }

    #[test]
    fn min_count_one_keeps_everything() {
        let corpus = vec![s("a cat a dog"), s("one bird")];
        let v = Vocab::build(&corpus, 1);
        for sent in &corpus {
            assert!(v.encode(sent).iter().all(|&i| i != UNK));
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let corpus = vec![s("a red cat on a mat")];
        let v = Vocab::build(&corpus, 1);
        assert_eq!(v.decode(&v.encode(&corpus[0])), corpus[0]);
    }
}
