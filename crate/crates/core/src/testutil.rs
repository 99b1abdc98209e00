//! Small trained model shared by unit tests.

use std::sync::OnceLock;

use crate::data::{build_vocab, generate_synthetic_corpus, Corpus, Vocabulary};
use crate::encoder::{features, init_encoder, train_classifier, EncoderConfig, EncoderParams, HeadPooling, TrainConfig};
use crate::gaussian::{fit_gaussian, GaussianStats};

pub(crate) struct Fixture {
    pub vocab: Vocabulary,
    pub corpus: Corpus,
    pub ood: Corpus,
    pub params: EncoderParams,
    pub stats: GaussianStats,
    pub train_features: Vec<Vec<f64>>,
}

pub(crate) fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let (id, ood) = generate_synthetic_corpus(5, 3, 24, 1).unwrap();
        let vocab = build_vocab(&id.all_texts().collect::<Vec<_>>(), 1).unwrap();
        let max_len = 12;
        let corpus = id.tokenize(&vocab, max_len);
        let ood = ood.tokenize(&vocab, max_len);
        let cfg = EncoderConfig {
            vocab_size: vocab.size(),
            num_layers: 1,
            num_heads: 2,
            model_dim: 8,
            ffn_dim: 16,
            max_seq_len: max_len,
            num_classes: 3,
            dropout: 0.0,
            seed: 1,
            attention_pooling: HeadPooling::Mean,
        };
        let tc = TrainConfig { learning_rate: 5e-3, epochs: 3, batch_size: 8, ..TrainConfig::desk() };
        let params = train_classifier(init_encoder(cfg).unwrap(), &corpus, &tc).unwrap().params;
        let train_features = features(&params, &corpus.train).unwrap();
        let labels: Vec<usize> = corpus.train.iter().map(|e| e.label).collect();
        let mut stats = fit_gaussian(&train_features, &labels, 3, 1e-3).unwrap();
        stats.extractor_checksum = params.checksum();
        Fixture { vocab, corpus, ood, params, stats, train_features }
    })
}
