use std::collections::BTreeMap;

/// Counts of every n-gram of order `1..=max_n`; the order is the key length.
/// Ordered so that float sums over the entries are reproducible.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NGramCounts {
    counts: BTreeMap<Vec<String>, usize>,
}

impl NGramCounts {
    pub fn new<S: AsRef<str>>(tokens: &[S], max_n: usize) -> Self {
        let mut counts = BTreeMap::new();
        for n in 1..=max_n {
            for w in tokens.windows(n) {
                let key: Vec<String> = w.iter().map(|s| s.as_ref().to_owned()).collect();
                *counts.entry(key).or_default() += 1;
            }
        }
        NGramCounts { counts }
    }

    pub fn get(&self, ngram: &[String]) -> usize {
        self.counts.get(ngram).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<String>, usize)> {
        self.counts.iter().map(|(k, &v)| (k, v))
    }

    /// Total count of n-grams of order `n`.
    pub fn total(&self, n: usize) -> usize {
        self.counts.iter().filter(|(k, _)| k.len() == n).map(|(_, &c)| c).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mass_per_order() {
        let toks = ["a", "b", "a", "b", "c"];
        let c = NGramCounts::new(&toks, 4);
        for n in 1..=6 {
            assert_eq!(c.total(n), if n <= 4 { toks.len().saturating_sub(n - 1) } else { 0 });
        }
        assert_eq!(c.get(&["a".into(), "b".into()]), 2);
    }
}
