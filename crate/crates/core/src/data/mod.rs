//! Corpus ingestion, vocabulary, whitespace tokenization, the synthetic
//! near-OOD benchmark generator and deterministic batching.

mod io;
mod synthetic;
mod vocab;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use io::{load_corpus, CorpusFormat};
pub use synthetic::{generate_synthetic_corpus, SyntheticConfig};
pub use vocab::{build_vocab, TokenId, Vocabulary, CLS, MASK, NUM_SPECIAL, PAD, UNK};

use crate::{Error, Result};

/// A fixed-length token sequence: `ids[0]` is `[CLS]`, followed by `len` real
/// tokens and `[PAD]` up to `max_seq_len`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenizedExample {
    pub ids: Vec<TokenId>,
    pub label: usize,
    /// True exactly at the real-token slots `1..=len`.
    pub maskable: Vec<bool>,
    pub len: usize,
}

impl TokenizedExample {
    pub fn max_seq_len(&self) -> usize {
        self.ids.len()
    }

    /// Number of leading non-PAD rows (`[CLS]` plus real tokens).
    pub fn active_len(&self) -> usize {
        self.len + 1
    }

    pub fn maskable_positions(&self) -> Vec<usize> {
        (0..self.ids.len()).filter(|&i| self.maskable[i]).collect()
    }

    /// Copy with `positions` overwritten by `[MASK]`.
    pub fn with_masked(&self, positions: &[usize]) -> TokenizedExample {
        let mut out = self.clone();
        for &p in positions {
            debug_assert!(self.maskable[p]);
            out.ids[p] = MASK;
        }
        out
    }

    pub fn count_masked(&self) -> usize {
        self.ids.iter().zip(&self.maskable).filter(|(&id, &m)| m && id == MASK).count()
    }
}

/// Whitespace tokenization with `[CLS]` prepended, truncation to
/// `max_seq_len` (including `[CLS]`) and right padding.
pub fn tokenize(text: &str, label: usize, vocab: &Vocabulary, max_seq_len: usize) -> TokenizedExample {
    assert!(max_seq_len >= 1, "max_seq_len must leave room for [CLS]");
    let mut ids = Vec::with_capacity(max_seq_len);
    ids.push(CLS);
    ids.extend(text.split_whitespace().take(max_seq_len - 1).map(|t| vocab.id(t)));
    let len = ids.len() - 1;
    ids.resize(max_seq_len, PAD);
    let maskable = (0..max_seq_len).map(|i| i >= 1 && i <= len).collect();
    TokenizedExample { ids, label, maskable, len }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextExample {
    pub text: String,
    pub label: usize,
}

/// Untokenized corpus with contiguous labels `0..label_names.len()`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextCorpus {
    pub train: Vec<TextExample>,
    pub dev: Vec<TextExample>,
    pub test: Vec<TextExample>,
    pub label_names: Vec<String>,
    pub provenance: String,
}

impl TextCorpus {
    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn all_texts(&self) -> impl Iterator<Item = &str> {
        self.train.iter().chain(&self.dev).chain(&self.test).map(|e| e.text.as_str())
    }

    pub fn tokenize(&self, vocab: &Vocabulary, max_seq_len: usize) -> Corpus {
        let tok =
            |xs: &[TextExample]| -> Vec<TokenizedExample> { xs.iter().map(|e| tokenize(&e.text, e.label, vocab, max_seq_len)).collect() };
        Corpus {
            train: tok(&self.train),
            dev: tok(&self.dev),
            test: tok(&self.test),
            num_classes: self.num_classes(),
            provenance: self.provenance.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub train: Vec<TokenizedExample>,
    pub dev: Vec<TokenizedExample>,
    pub test: Vec<TokenizedExample>,
    pub num_classes: usize,
    pub provenance: String,
}

impl Corpus {
    pub fn require_train(&self) -> Result<&[TokenizedExample]> {
        if self.train.is_empty() {
            return Err(Error::EmptyCorpus(format!("train split of {} is empty", self.provenance)));
        }
        Ok(&self.train)
    }
}

/// Shuffled mini-batches of indices into a split. Each epoch reshuffles from
/// a stream derived from `(seed, epoch)` only.
#[derive(Debug, Clone)]
pub struct BatchIter {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl BatchIter {
    pub fn new(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Self {
        assert!(batch_size > 0);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c_0000_0000 ^ epoch as u64);
        order.shuffle(&mut rng);
        BatchIter { order, batch_size, pos: 0 }
    }
}

impl Iterator for BatchIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab_ab() -> Vocabulary {
        build_vocab(&["a b"], 1).unwrap()
    }

    #[test]
    fn empty_text_is_cls_only() {
        let e = tokenize("", 0, &vocab_ab(), 4);
        assert_eq!(e.ids, vec![CLS, PAD, PAD, PAD]);
        assert_eq!(e.len, 0);
        assert!(e.maskable_positions().is_empty());
    }

    #[test]
    fn short_text_is_padded() {
        let v = vocab_ab();
        let e = tokenize("a b", 1, &v, 4);
        assert_eq!(e.ids, vec![CLS, v.id("a"), v.id("b"), PAD]);
        assert_eq!(e.maskable, vec![false, true, true, false]);
        assert_eq!(e.label, 1);
    }

    #[test]
    fn long_text_is_truncated() {
        let text = vec!["a"; 100].join(" ");
        let e = tokenize(&text, 0, &vocab_ab(), 32);
        assert_eq!(e.len, 31);
        assert_eq!(e.ids.len(), 32);
        assert!(e.ids.iter().all(|&i| i != PAD));
    }

    #[test]
    fn unknown_words_are_maskable() {
        let e = tokenize("a zzz", 0, &vocab_ab(), 5);
        assert_eq!(e.ids[2], UNK);
        assert_eq!(e.maskable_positions(), vec![1, 2]);
    }

    #[test]
    fn masking_counts() {
        let e = tokenize("a b a", 0, &vocab_ab(), 6);
        let m = e.with_masked(&[1, 3]);
        assert_eq!(m.count_masked(), 2);
        assert_eq!(m.ids[2], e.ids[2]);
    }

    #[test]
    fn batches_cover_every_index_once() {
        let mut seen: Vec<usize> = BatchIter::new(37, 8, 3, 0).flatten().collect();
        seen.sort();
        assert_eq!(seen, (0..37).collect::<Vec<_>>());
        let a: Vec<_> = BatchIter::new(37, 8, 3, 1).collect();
        let b: Vec<_> = BatchIter::new(37, 8, 3, 1).collect();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
    }

    proptest::proptest! {
        #[test]
        fn tokenize_invariants(words in proptest::collection::vec("[a-d]{1,2}", 0..40), max_len in 1usize..20) {
            let v = build_vocab(&["a b c"], 1).unwrap();
            let text = words.join(" ");
            let e = tokenize(&text, 0, &v, max_len);
            let again = tokenize(&text, 0, &v, max_len);
            proptest::prop_assert_eq!(&e, &again);
            proptest::prop_assert_eq!(e.ids[0], CLS);
            proptest::prop_assert_eq!(e.ids.len(), max_len);
            proptest::prop_assert_eq!(e.maskable_positions().len(), e.len);
            proptest::prop_assert_eq!(e.len, words.len().min(max_len - 1));
            // no PAD before a real token
            let first_pad = e.ids.iter().position(|&i| i == PAD).unwrap_or(max_len);
            proptest::prop_assert!(e.ids[first_pad..].iter().all(|&i| i == PAD));
        }
    }
}
