use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const CLS: TokenId = 1;
pub const MASK: TokenId = 2;
pub const UNK: TokenId = 3;
pub const NUM_SPECIAL: usize = 4;

const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[PAD]", "[CLS]", "[MASK]", "[UNK]"];

/// Whitespace-token vocabulary with four fixed special ids
/// (`PAD=0, CLS=1, MASK=2, UNK=3`). Regular tokens start at [`NUM_SPECIAL`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile { tokens: v.id_to_token[NUM_SPECIAL..].to_vec() }
    }
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = Error;

    fn try_from(f: VocabFile) -> Result<Self> {
        Vocabulary::from_tokens(f.tokens)
    }
}

impl Vocabulary {
    /// Builds a vocabulary from regular (non-special) tokens in id order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut token_to_id = HashMap::new();
        for tok in tokens {
            let tok = tok.into();
            if SPECIAL_TOKENS.contains(&tok.as_str()) || tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(Error::Invalid(format!("invalid vocabulary token {tok:?}")));
            }
            let id = id_to_token.len() as TokenId;
            if token_to_id.insert(tok.clone(), id).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token {tok:?}")));
            }
            id_to_token.push(tok);
        }
        Ok(Vocabulary { token_to_id, id_to_token })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    /// Number of regular tokens, i.e. ids that may be sampled as replacements.
    pub fn num_regular(&self) -> usize {
        self.size() - NUM_SPECIAL
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < NUM_SPECIAL
    }

    pub fn regular_tokens(&self) -> &[String] {
        &self.id_to_token[NUM_SPECIAL..]
    }

    /// Hex SHA-256 over the id-ordered token list.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.id_to_token {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

/// Counts whitespace tokens over `raw_texts` and keeps those seen at least
/// `min_freq` times. Kept tokens are ordered by descending frequency, then
/// lexicographically.
pub fn build_vocab<S: AsRef<str>>(raw_texts: &[S], min_freq: usize) -> Result<Vocabulary> {
    if raw_texts.is_empty() {
        return Err(Error::EmptyCorpus("no texts to build a vocabulary from".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for text in raw_texts {
        for tok in text.as_ref().split_whitespace() {
            if SPECIAL_TOKENS.contains(&tok) {
                continue;
            }
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_freq.max(1)).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_threshold() {
        let v = build_vocab(&["a b", "a c"], 2).unwrap();
        assert!(v.contains("a"));
        assert_eq!(v.id("b"), UNK);
        assert_eq!(v.id("c"), UNK);
        assert_eq!(v.size(), NUM_SPECIAL + 1);
    }

    #[test]
    fn single_token() {
        let v = build_vocab(&["x"], 1).unwrap();
        assert_eq!(v.size(), 5);
        assert_eq!(v.id("x"), 4);
    }

    #[test]
    fn empty_corpus_is_error() {
        let texts: [&str; 0] = [];
        assert!(matches!(build_vocab(&texts, 1), Err(Error::EmptyCorpus(_))));
    }

    #[test]
    fn specials_are_fixed() {
        let v = build_vocab(&["[MASK] hello"], 1).unwrap();
        assert_eq!(v.token(PAD), Some("[PAD]"));
        assert_eq!(v.token(CLS), Some("[CLS]"));
        assert_eq!(v.token(MASK), Some("[MASK]"));
        assert_eq!(v.token(UNK), Some("[UNK]"));
        assert_eq!(v.size(), 5);
    }

    #[test]
    fn serde_round_trip() {
        let v = build_vocab(&["b a a c"], 1).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(v, back);
        assert_eq!(v.fingerprint(), back.fingerprint());
    }
}
