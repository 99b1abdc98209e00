use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::tokenize;
use crate::encoder::EncoderOutput;
use crate::scoring::softmax;
use crate::testutil::fixture;

fn built(c: Construction) -> SurrogateExample {
    match c {
        Construction::Built(s) => s,
        Construction::Skipped(s) => panic!("unexpected skip: {}", s.reason),
    }
}

fn ranked(ranker: &dyn TokenRanker, ex: &TokenizedExample) -> Vec<usize> {
    let p = &fixture().params;
    ranker.rank(ex, &p.forward_one(ex).unwrap(), p).unwrap()
}

#[test]
fn attention_order_with_ties() {
    let f = fixture();
    let ex = tokenize("a b c d", 0, &f.vocab, f.params.config.max_seq_len);
    let out = EncoderOutput { cls_feature: vec![0.0; 8], logits: vec![0.0; 3], cls_attention: vec![0.1, 0.5, 0.2, 0.2] };
    assert_eq!(AttentionRanker.rank(&ex, &out, &f.params).unwrap(), vec![2, 3, 4, 1]);
    let short = EncoderOutput { cls_attention: vec![0.5, 0.5], ..out };
    assert!(AttentionRanker.rank(&ex, &short, &f.params).is_err());
}

#[test]
fn random_order_is_seeded_permutation() {
    let f = fixture();
    let ex = &f.corpus.train[0];
    let a = ranked(&RandomRanker { seed: 7 }, ex);
    assert_eq!(a, ranked(&RandomRanker { seed: 7 }, ex));
    let mut sorted = a.clone();
    sorted.sort();
    assert_eq!(sorted, ex.maskable_positions());
    let differs = (0..20u64).any(|s| ranked(&RandomRanker { seed: s }, ex) != a);
    assert!(differs);
}

#[test]
fn leave_one_out_matches_exhaustive_oracle() {
    let f = fixture();
    for ex in f.corpus.train.iter().take(5) {
        let gold = softmax(&f.params.forward_one(ex).unwrap().logits)[ex.label];
        let mut scored: Vec<(usize, f64)> = ex
            .maskable_positions()
            .into_iter()
            .map(|p| {
                let masked = f.params.forward_one(&ex.with_masked(&[p])).unwrap();
                (p, gold - softmax(&masked.logits)[ex.label])
            })
            .collect();
        // stable sort keeps lower positions first among equal drops
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let oracle: Vec<usize> = scored.into_iter().map(|(p, _)| p).collect();
        assert_eq!(ranked(&LeaveOneOutRanker, ex), oracle);
    }
}

#[test]
fn strategy_registry_by_name() {
    let reg = StrategyRegistry::with_builtins();
    assert_eq!(reg.names().collect::<Vec<_>>(), vec!["attention", "leave_one_out", "loo", "random"]);
    assert_eq!(MaskStrategy::new("loo", 0).build(&reg).unwrap().name(), "loo");
    assert_eq!(MaskStrategy::new("random", 3).build(&reg).unwrap().name(), "random");
    assert!(matches!(MaskStrategy::new("bogus", 0).build(&reg), Err(Error::Unknown { .. })));
}

fn construct(ex: &TokenizedExample, opts: &ConstructOptions) -> SurrogateExample {
    let f = fixture();
    built(construct_surrogate(ex, 0, &f.params, &f.stats, &AttentionRanker, opts).unwrap())
}

#[test]
fn stopping_extremes() {
    let f = fixture();
    let ex = &f.corpus.train[3];
    let always = construct(ex, &ConstructOptions { threshold_delta: -1e12, ..Default::default() });
    assert_eq!((always.t_star, always.stop_step, always.exceeded), (1, 1, true));
    assert_eq!(always.tokens.count_masked(), 1);
    assert_eq!(always.tokens.label, 3);

    let never = construct(ex, &ConstructOptions { threshold_delta: 1e12, ..Default::default() });
    assert_eq!((never.t_star, never.exceeded), (ex.len, false));
    assert_eq!(never.tokens.count_masked(), ex.len);
    assert!(never.tokens.ids[1..=ex.len].iter().all(|&id| id == MASK));
}

#[test]
fn replay_confirms_minimal_stopping_step() {
    let f = fixture();
    let ranker = AttentionRanker;
    let set = construct_surrogate_set(&f.corpus.train, &f.params, &f.stats, &ranker, &Default::default()).unwrap();
    assert_eq!(set.surrogates.len() + set.skipped.len(), f.corpus.train.len());
    for s in &set.surrogates {
        let ex = &f.corpus.train[s.source_index];
        let order = ranked(&ranker, ex);
        assert_eq!(s.masked_order, order[..s.t_star]);
        let tau = f.stats.class_thresholds[ex.label];
        let dist = |t: usize| f.stats.distance(&f.params.forward_one(&ex.with_masked(&order[..t])).unwrap().cls_feature).unwrap();
        for t in 1..s.t_star {
            assert!(dist(t) <= tau, "example {} stops late", s.source_index);
        }
        if s.exceeded {
            assert!(dist(s.t_star) > tau);
        } else {
            assert_eq!(s.t_star, ex.len);
        }
        assert_eq!(s.distance, dist(s.t_star));
    }
    let n = set.surrogates.len();
    assert_eq!(set.summary.num_built, n);
    assert_eq!(set.summary.t_star_histogram.values().sum::<usize>(), n);
}

#[test]
fn offset_extends_the_same_prefix() {
    let f = fixture();
    for ex in f.corpus.train.iter().take(8) {
        let base = construct(ex, &Default::default());
        for off in [2, 4, 8] {
            let s = construct(ex, &ConstructOptions { stop_offset: off, ..Default::default() });
            assert_eq!(s.stop_step, base.stop_step);
            assert_eq!(s.t_star, (base.stop_step + off).min(ex.len));
            assert_eq!(s.masked_order[..base.t_star], base.masked_order[..]);
        }
    }
}

#[test]
fn larger_delta_never_stops_earlier() {
    let f = fixture();
    for ex in f.corpus.train.iter().take(8) {
        let mut prev = 0;
        for delta in [-5.0, -1.0, 0.0, 1.0, 5.0, 50.0] {
            let s = construct(ex, &ConstructOptions { threshold_delta: delta, ..Default::default() });
            assert!(s.t_star >= prev);
            prev = s.t_star;
        }
    }
}

#[test]
fn global_max_threshold_dominates_gold() {
    let f = fixture();
    let opts = ConstructOptions { threshold_mode: ThresholdMode::GlobalMax, ..Default::default() };
    for c in 0..3 {
        assert!(opts.threshold(&f.stats, c) >= ConstructOptions::default().threshold(&f.stats, c));
    }
}

#[test]
fn bad_labels_and_empty_examples() {
    let f = fixture();
    let mut ex = f.corpus.train[0].clone();
    ex.label = 3;
    assert!(construct_surrogate(&ex, 0, &f.params, &f.stats, &AttentionRanker, &Default::default()).is_err());
    let empty = tokenize("", 0, &f.vocab, f.params.config.max_seq_len);
    let r = construct_surrogate(&empty, 9, &f.params, &f.stats, &AttentionRanker, &Default::default()).unwrap();
    assert!(matches!(r, Construction::Skipped(SkipRecord { source_index: 9, .. })));
}

// Wilson-Hilferty approximation of the chi-square upper quantile.
fn chi2_critical(df: f64, z: f64) -> f64 {
    let a = 2.0 / (9.0 * df);
    df * (1.0 - a + z * a.sqrt()).powi(3)
}

#[test]
fn mask_replacement_is_uniform_over_regular_tokens() {
    let f = fixture();
    let v = f.vocab.size();
    let ex = f.corpus.train[0].with_masked(&[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut counts = vec![0usize; v];
    let draws = 10_000;
    for _ in 0..draws {
        let out = replace_masks(&ex, v, &mut rng).unwrap();
        assert_eq!(out.ids[2..], ex.ids[2..]);
        counts[out.ids[1] as usize] += 1;
    }
    assert!(counts[..NUM_SPECIAL].iter().all(|&c| c == 0));
    let r = v - NUM_SPECIAL;
    let expect = draws as f64 / r as f64;
    let chi2: f64 = counts[NUM_SPECIAL..].iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    assert!(chi2 < chi2_critical((r - 1) as f64, 2.3263), "chi2 {chi2} with {r} cells");
}

#[test]
fn replacement_leaves_unmasked_and_needs_regular_tokens() {
    let f = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ex = &f.corpus.train[2];
    assert_eq!(&replace_masks(ex, f.vocab.size(), &mut rng).unwrap(), ex);
    assert!(replace_masks(ex, NUM_SPECIAL, &mut rng).is_err());
}

#[test]
fn jsonl_round_trip() {
    let f = fixture();
    let set = construct_surrogate_set(&f.corpus.train[..10], &f.params, &f.stats, &AttentionRanker, &Default::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    write_surrogates_jsonl(&path, &set.surrogates).unwrap();
    assert_eq!(read_surrogates_jsonl(&path).unwrap(), set.surrogates);
    std::fs::write(&path, "{not json}\n").unwrap();
    assert!(matches!(read_surrogates_jsonl(&path), Err(Error::Parse { line: 1, .. })));
}
