use poe::data::{build_vocab, Corpus, SyntheticConfig, TokenizedExample};
use poe::encoder::{init_encoder, train_classifier, EncoderConfig, TrainConfig};

fn separable_corpus() -> (Corpus, usize) {
    let cfg = SyntheticConfig {
        seed: 3,
        num_classes: 2,
        ood_classes: 1,
        train_per_class: 100,
        dev_per_class: 40,
        test_per_class: 10,
        ood_test_total: 10,
        p_topic: 0.5,
        p_cross_topic: 0.0,
        p_heldout_noise: 0.0,
        ..SyntheticConfig::default()
    };
    let (id, _) = cfg.generate().unwrap();
    let vocab = build_vocab(&id.all_texts().collect::<Vec<_>>(), 1).unwrap();
    (id.tokenize(&vocab, cfg.max_len + 1), vocab.size())
}

fn bag_of_words(ex: &TokenizedExample, vocab_size: usize) -> Vec<f64> {
    let mut x = vec![0.0; vocab_size + 1];
    for &p in &ex.maskable_positions() {
        x[ex.ids[p] as usize] += 1.0;
    }
    x[vocab_size] = 1.0;
    x
}

/// Perceptron on bag-of-words counts. It converges (zero mistakes in a full
/// pass) exactly when the examples are linearly separable, given enough passes.
fn perceptron_separates(examples: &[&TokenizedExample], vocab_size: usize) -> bool {
    let xs: Vec<Vec<f64>> = examples.iter().map(|e| bag_of_words(e, vocab_size)).collect();
    let mut w = vec![0.0; vocab_size + 1];
    for _ in 0..1000 {
        let mut mistakes = 0;
        for (x, e) in xs.iter().zip(examples) {
            let y = if e.label == 1 { 1.0 } else { -1.0 };
            let margin: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() * y;
            if margin <= 0.0 {
                mistakes += 1;
                w.iter_mut().zip(x).for_each(|(wi, xi)| *wi += y * xi);
            }
        }
        if mistakes == 0 {
            return true;
        }
    }
    false
}

#[test]
fn small_encoder_learns_a_linearly_separable_task() {
    let (corpus, vocab_size) = separable_corpus();
    let all: Vec<&TokenizedExample> = corpus.train.iter().chain(&corpus.dev).collect();
    assert!(perceptron_separates(&all, vocab_size), "bag-of-words oracle found the task inseparable");

    let mut cfg = EncoderConfig::small(vocab_size, 2, corpus.train[0].max_seq_len());
    cfg.num_layers = 1;
    cfg.model_dim = 16;
    cfg.num_heads = 2;
    cfg.ffn_dim = 32;
    let tc = TrainConfig { epochs: 10, seed: 5, ..TrainConfig::desk() };
    let out = train_classifier(init_encoder(cfg).unwrap(), &corpus, &tc).unwrap();
    assert!(out.epochs.len() <= 10);
    let dev = out.epochs.last().and_then(|e| e.dev_acc).unwrap();
    assert!(dev >= 0.95, "dev accuracy {dev} after {} epochs", out.epochs.len());
}
