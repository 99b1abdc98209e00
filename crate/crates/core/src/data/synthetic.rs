//! Topic-mixture text generator for desk-scale near-OOD experiments.
//!
//! Every sentence mixes function words, a shared pool of generic words and
//! topic words. ID classes own one topic each; the OOD corpus draws from
//! held-out topics while keeping the same function/generic words and
//! occasionally borrowing a word from one ID topic.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TextCorpus, TextExample};
use crate::{Error, Result};

const FUNCTION_WORDS: [&str; 16] =
    ["the", "a", "of", "to", "and", "in", "is", "it", "that", "for", "on", "with", "as", "this", "was", "at"];
const SYLLABLES: [&str; 16] = ["ka", "lo", "mi", "ne", "ru", "ta", "vo", "zi", "be", "du", "fa", "go", "he", "ji", "pu", "se"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub ood_classes: usize,
    pub train_per_class: usize,
    pub dev_per_class: usize,
    pub test_per_class: usize,
    /// Total OOD test sentences, spread evenly over held-out topics.
    pub ood_test_total: usize,
    pub words_per_topic: usize,
    pub generic_words: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Per-token probability of drawing from the sentence's own topic.
    pub p_topic: f64,
    /// ID sentences: probability of a word from another ID topic.
    pub p_cross_topic: f64,
    /// ID sentences: probability of a word from a held-out topic, so that
    /// OOD words are in-vocabulary but carry no class signal.
    pub p_heldout_noise: f64,
    /// OOD sentences: probability of borrowing a word from one ID topic.
    pub p_id_leak: f64,
    /// Share of non-topic tokens that are function words (rest generic).
    pub p_function: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            num_classes: 4,
            ood_classes: 2,
            train_per_class: 200,
            dev_per_class: 50,
            test_per_class: 50,
            ood_test_total: 200,
            words_per_topic: 12,
            generic_words: 24,
            min_len: 12,
            max_len: 24,
            p_topic: 0.45,
            p_cross_topic: 0.06,
            p_heldout_noise: 0.05,
            p_id_leak: 0.05,
            p_function: 0.6,
        }
    }
}

fn synth_word(index: usize) -> String {
    let mut w = String::new();
    let mut i = index;
    for _ in 0..3 {
        w.push_str(SYLLABLES[i % SYLLABLES.len()]);
        i /= SYLLABLES.len();
    }
    w
}

struct WordBank {
    generic: Vec<String>,
    topics: Vec<Vec<String>>,
}

impl WordBank {
    fn new(cfg: &SyntheticConfig) -> Self {
        let generic = (0..cfg.generic_words).map(synth_word).collect();
        let base = cfg.generic_words;
        let topics = (0..cfg.num_classes + cfg.ood_classes)
            .map(|t| (0..cfg.words_per_topic).map(|j| synth_word(base + t * cfg.words_per_topic + j)).collect())
            .collect();
        WordBank { generic, topics }
    }
}

impl SyntheticConfig {
    pub fn new(seed: u64, num_classes: usize, train_per_class: usize, ood_classes: usize) -> Self {
        SyntheticConfig {
            seed,
            num_classes,
            ood_classes,
            train_per_class,
            dev_per_class: (train_per_class / 4).max(1),
            test_per_class: (train_per_class / 4).max(1),
            ood_test_total: (train_per_class / 4).max(1) * num_classes,
            ..SyntheticConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 ID classes, got {}", self.num_classes)));
        }
        if self.ood_classes == 0 {
            return Err(Error::Config("ood_classes must be at least 1".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!("bad length range {}..={}", self.min_len, self.max_len)));
        }
        if self.words_per_topic == 0 || self.generic_words == 0 {
            return Err(Error::Config("word pools must be non-empty".into()));
        }
        let p_id = self.p_topic + self.p_cross_topic + self.p_heldout_noise;
        let p_ood = self.p_topic + self.p_id_leak;
        for (name, p) in [("ID", p_id), ("OOD", p_ood), ("function", self.p_function)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} word probabilities sum to {p}, outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Generates the ID corpus (train/dev/test over `num_classes` topics) and
    /// the OOD corpus (test split only, labelled by held-out topic).
    pub fn generate(&self) -> Result<(TextCorpus, TextCorpus)> {
        self.validate()?;
        let bank = WordBank::new(self);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let k = self.num_classes;

        let split = |n_per_class: usize, rng: &mut ChaCha8Rng| -> Vec<TextExample> {
            let mut out = Vec::with_capacity(n_per_class * k);
            for _ in 0..n_per_class {
                for class in 0..k {
                    out.push(TextExample { text: self.id_sentence(&bank, class, rng), label: class });
                }
            }
            out
        };
        let train = split(self.train_per_class, &mut rng);
        let dev = split(self.dev_per_class, &mut rng);
        let test = split(self.test_per_class, &mut rng);

        let ood_test = (0..self.ood_test_total)
            .map(|i| {
                let topic = i % self.ood_classes;
                TextExample { text: self.ood_sentence(&bank, k + topic, &mut rng), label: topic }
            })
            .collect();

        let id = TextCorpus {
            train,
            dev,
            test,
            label_names: (0..k).map(|c| format!("topic{c}")).collect(),
            provenance: format!("synthetic:id:seed={}", self.seed),
        };
        let ood = TextCorpus {
            train: vec![],
            dev: vec![],
            test: ood_test,
            label_names: (0..self.ood_classes).map(|c| format!("heldout{c}")).collect(),
            provenance: format!("synthetic:ood:seed={}", self.seed),
        };
        Ok((id, ood))
    }

    fn filler<'a>(&self, bank: &'a WordBank, rng: &mut ChaCha8Rng) -> &'a str {
        if rng.gen_bool(self.p_function) {
            FUNCTION_WORDS[rng.gen_range(0..FUNCTION_WORDS.len())]
        } else {
            &bank.generic[rng.gen_range(0..bank.generic.len())]
        }
    }

    fn pick<'a>(words: &'a [String], rng: &mut ChaCha8Rng) -> &'a str {
        &words[rng.gen_range(0..words.len())]
    }

    fn id_sentence(&self, bank: &WordBank, class: usize, rng: &mut ChaCha8Rng) -> String {
        let len = rng.gen_range(self.min_len..=self.max_len);
        let k = self.num_classes;
        let mut words = Vec::with_capacity(len);
        for _ in 0..len {
            let r: f64 = rng.gen();
            let w = if r < self.p_topic {
                Self::pick(&bank.topics[class], rng)
            } else if r < self.p_topic + self.p_cross_topic {
                let other = (class + rng.gen_range(1..k)) % k;
                Self::pick(&bank.topics[other], rng)
            } else if r < self.p_topic + self.p_cross_topic + self.p_heldout_noise {
                let t = k + rng.gen_range(0..self.ood_classes);
                Self::pick(&bank.topics[t], rng)
            } else {
                self.filler(bank, rng)
            };
            words.push(w);
        }
        words.join(" ")
    }

    fn ood_sentence(&self, bank: &WordBank, topic: usize, rng: &mut ChaCha8Rng) -> String {
        let len = rng.gen_range(self.min_len..=self.max_len);
        let leak_class = rng.gen_range(0..self.num_classes);
        let mut words = Vec::with_capacity(len);
        for _ in 0..len {
            let r: f64 = rng.gen();
            let w = if r < self.p_topic {
                Self::pick(&bank.topics[topic], rng)
            } else if r < self.p_topic + self.p_id_leak {
                Self::pick(&bank.topics[leak_class], rng)
            } else {
                self.filler(bank, rng)
            };
            words.push(w);
        }
        words.join(" ")
    }
}

/// `(ID corpus, OOD corpus)` with default mixing parameters; dev and test
/// splits get a quarter of `n_per_class` each.
pub fn generate_synthetic_corpus(
    seed: u64,
    num_classes: usize,
    n_per_class: usize,
    ood_classes: usize,
) -> Result<(TextCorpus, TextCorpus)> {
    SyntheticConfig::new(seed, num_classes, n_per_class, ood_classes).generate()
}
