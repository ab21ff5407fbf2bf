use std::collections::HashMap;

use super::{Corpus, Instruction};
use crate::error::{Error, Result};

/// Distinct tokens with dense indices in first-occurrence order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut v = Vocabulary::default();
        for b in corpus.blocks() {
            for i in &b.instrs {
                v.add(i.as_str());
            }
        }
        Ok(v)
    }

    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            self.counts[i] += 1;
            return i;
        }
        let i = self.tokens.len();
        self.tokens.push(token.to_owned());
        self.counts.push(1);
        self.index.insert(token.to_owned(), i);
        i
    }

    /// Drop tokens seen fewer than `min_count` times, re-indexing densely in the same order.
    pub fn with_min_count(&self, min_count: u64) -> Vocabulary {
        let mut v = Vocabulary::default();
        for (t, &c) in self.tokens.iter().zip(&self.counts) {
            if c >= min_count {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t.clone());
                v.counts.push(c);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn contains(&self, token: &Instruction) -> bool {
        self.index.contains_key(token.as_str())
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn count(&self, token: &str) -> u64 {
        self.index_of(token).map_or(0, |i| self.counts[i])
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Vocabulary size after each of `parts` equal slices of the instruction stream.
///
/// Returns `(fraction processed, cumulative V)` pairs; the last entry is the
/// full-corpus vocabulary size.
pub fn vocab_growth(corpus: &Corpus, parts: usize) -> Result<Vec<(f64, usize)>> {
    if parts == 0 {
        return Err(Error::BadConfig("parts must be at least 1".into()));
    }
    let total = corpus.num_instructions();
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut seen = std::collections::HashSet::new();
    let mut stream = corpus.blocks().flat_map(|b| b.instrs.iter());
    let mut consumed = 0;
    let mut out = Vec::with_capacity(parts);
    for k in 1..=parts {
        let boundary = (total * k).div_ceil(parts);
        while consumed < boundary {
            let tok = stream.next().expect("boundary never exceeds total");
            seen.insert(tok.as_str());
            consumed += 1;
        }
        out.push((k as f64 / parts as f64, seen.len()));
    }
    Ok(out)
}

/// Fraction of held-out instruction occurrences whose token is not in `vocab`.
pub fn oov_rate(vocab: &Vocabulary, heldout: &Corpus) -> Result<f64> {
    let total = heldout.num_instructions();
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }
    let unseen = heldout
        .blocks()
        .flat_map(|b| b.instrs.iter())
        .filter(|i| !vocab.contains(i))
        .count();
    Ok(unseen as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Arch, BasicBlock, Function, OptLevel};

    fn corpus_of(blocks: &[&[&str]]) -> Corpus {
        Corpus {
            functions: vec![Function {
                name: "f".into(),
                arch: Arch::X86_64,
                opt: OptLevel::O1,
                blocks: blocks
                    .iter()
                    .enumerate()
                    .map(|(i, toks)| BasicBlock {
                        id: i as u64,
                        arch: Arch::X86_64,
                        opt: OptLevel::O1,
                        instrs: toks.iter().map(|t| Instruction::new(*t)).collect(),
                    })
                    .collect(),
            }],
        }
    }

    #[test]
    fn counts_and_size() {
        let v = Vocabulary::from_corpus(&corpus_of(&[&["A", "B", "A"]])).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v.count("A"), 2);
        assert_eq!(v.count("B"), 1);
        assert_eq!(v.index_of("A"), Some(0));
        assert_eq!(v.total(), 3);
    }

    #[test]
    fn same_multiset_same_vocabulary_stats() {
        let a = Vocabulary::from_corpus(&corpus_of(&[&["A", "B"], &["A"]])).unwrap();
        let b = Vocabulary::from_corpus(&corpus_of(&[&["A"], &["B", "A"]])).unwrap();
        assert_eq!(a.len(), b.len());
        assert_eq!(a.count("A"), b.count("A"));
        assert_eq!(a.count("B"), b.count("B"));
    }

    #[test]
    fn empty_corpus_errors() {
        assert!(matches!(Vocabulary::from_corpus(&Corpus::default()), Err(Error::EmptyCorpus)));
        assert!(matches!(vocab_growth(&Corpus::default(), 3), Err(Error::EmptyCorpus)));
        let v = Vocabulary::default();
        assert!(matches!(oov_rate(&v, &Corpus::default()), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn growth_of_single_token_corpus() {
        let g = vocab_growth(&corpus_of(&[&["A"]]), 4).unwrap();
        assert_eq!(g, vec![(0.25, 1), (0.5, 1), (0.75, 1), (1.0, 1)]);
        let c = corpus_of(&[&["A", "B"], &["C"]]);
        assert_eq!(vocab_growth(&c, 1).unwrap(), vec![(1.0, 3)]);
    }

    #[test]
    fn oov_extremes_and_mixed() {
        let train = Vocabulary::from_corpus(&corpus_of(&[&["A", "B", "C"]])).unwrap();
        assert_eq!(oov_rate(&train, &corpus_of(&[&["A", "C"], &["B"]])).unwrap(), 0.0);
        assert_eq!(oov_rate(&train, &corpus_of(&[&["X", "Y"]])).unwrap(), 1.0);
        // 2 of 5 occurrences unseen, by hand count.
        let r = oov_rate(&train, &corpus_of(&[&["A", "X", "A"], &["Y", "B"]])).unwrap();
        assert_eq!(r, 2.0 / 5.0);
    }

    #[test]
    fn min_count_filter_reindexes() {
        let v = Vocabulary::from_corpus(&corpus_of(&[&["A", "B", "A", "C", "C"]])).unwrap();
        let f = v.with_min_count(2);
        assert_eq!(f.tokens(), &["A".to_string(), "C".to_string()]);
        assert_eq!(f.index_of("C"), Some(1));
    }
}
