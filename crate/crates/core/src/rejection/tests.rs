use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::encoder::train_classifier;
use crate::poe::{construct_surrogate_set, AttentionRanker};
use crate::testutil::fixture;

// Direct pair enumeration of the margin loss, optionally with a given xi.
fn oracle(f: &[Vec<f64>], y: &[usize], xi: Option<f64>) -> (f64, f64, f64, f64) {
    let b = f.len();
    let d = f[0].len();
    let sq = |i: usize, j: usize| -> f64 { (0..d).map(|t| (f[i][t] - f[j][t]).powi(2)).sum() };
    let mut max_pos: f64 = 0.0;
    for i in 0..b {
        for p in 0..b {
            if p != i && y[p] == y[i] {
                max_pos = max_pos.max(sq(i, p));
            }
        }
    }
    let xi = xi.unwrap_or(max_pos);
    let (mut lp, mut ln) = (0.0, 0.0);
    for i in 0..b {
        let pos: Vec<usize> = (0..b).filter(|&p| p != i && y[p] == y[i]).collect();
        let neg: Vec<usize> = (0..b).filter(|&n| y[n] != y[i]).collect();
        if !pos.is_empty() {
            lp += pos.iter().map(|&p| sq(i, p)).sum::<f64>() / pos.len() as f64;
        }
        if !neg.is_empty() {
            ln += neg.iter().map(|&n| (xi - sq(i, n)).max(0.0)).sum::<f64>() / neg.len() as f64;
        }
    }
    (lp, ln, (lp + ln) / (d * b) as f64, xi)
}

fn rows(f: &[Vec<f64>]) -> Vec<&[f64]> {
    f.iter().map(Vec::as_slice).collect()
}

#[test]
fn degenerate_batches() {
    let f = vec![vec![1.0, 2.0]; 3];
    let m = mcl_loss(&rows(&f), &[1, 1, 1], 2).unwrap();
    assert_eq!((m.xi, m.l_p, m.l_n, m.l_margin), (0.0, 0.0, 0.0, 0.0));

    let f = vec![vec![0.0, 0.0], vec![1.0, 2.0]];
    let m = mcl_loss(&rows(&f), &[0, 1], 2).unwrap();
    assert_eq!((m.xi, m.l_p, m.l_n, m.l_margin), (0.0, 0.0, 0.0, 0.0));
    assert!(m.grad.iter().flatten().all(|g| *g == 0.0));
}

#[test]
fn hand_set_batch_matches_pair_oracle() {
    let f = vec![vec![0.0, 0.0], vec![1.0, 0.5], vec![0.8, 0.2], vec![2.0, -1.0]];
    let y = [0, 0, 2, 2];
    let m = mcl_loss(&rows(&f), &y, 2).unwrap();
    let (lp, ln, lm, xi) = oracle(&f, &y, None);
    for (a, b) in [(m.l_p, lp), (m.l_n, ln), (m.l_margin, lm), (m.xi, xi)] {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
    // xi = |f2 - f3|^2 = 1.44 + 1.44
    assert!((m.xi - 2.88).abs() < 1e-12);
    assert!(m.l_n > 0.0);
}

#[test]
fn label_and_size_errors() {
    let f = vec![vec![0.0], vec![1.0]];
    assert!(matches!(mcl_loss(&rows(&f), &[0, 3], 2), Err(Error::Label { label: 3, max: 2 })));
    assert!(mcl_loss(&rows(&f[..1]), &[0], 2).is_err());
    assert!(mcl_loss(&rows(&f), &[0], 2).is_err());
}

fn random_batch(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
    let b = rng.gen_range(2..=6);
    let d = rng.gen_range(1..=4);
    let f = (0..b).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let y = (0..b).map(|_| rng.gen_range(0..=2)).collect();
    (f, y)
}

// Away from ReLU kinks and from ties for the largest positive distance.
fn generic(f: &[Vec<f64>], y: &[usize]) -> bool {
    let b = f.len();
    let xi = oracle(f, y, None).3;
    let sq = |i: usize, j: usize| -> f64 { f[i].iter().zip(&f[j]).map(|(a, c)| (a - c).powi(2)).sum() };
    let mut pos: Vec<f64> = Vec::new();
    for i in 0..b {
        for j in 0..b {
            if i < j && y[i] == y[j] {
                pos.push(sq(i, j));
            }
            if y[i] != y[j] && (xi - sq(i, j)).abs() < 1e-4 {
                return false;
            }
        }
    }
    pos.sort_by(|a, c| c.total_cmp(a));
    pos.len() < 2 || pos[0] - pos[1] > 1e-4
}

fn rel_err(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s < 1e-8 {
        (a - b).abs()
    } else {
        (a - b).abs() / s
    }
}

fn gradient_check(mode: XiGradient) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    while checked < 50 {
        let (f, y) = random_batch(&mut rng);
        if !generic(&f, &y) {
            continue;
        }
        let m = mcl_loss_with(&rows(&f), &y, 2, mode).unwrap();
        let frozen = match mode {
            XiGradient::Detached => Some(m.xi),
            XiGradient::Full => None,
        };
        let h = 1e-6;
        for i in 0..f.len() {
            for t in 0..f[0].len() {
                let mut plus = f.clone();
                plus[i][t] += h;
                let mut minus = f.clone();
                minus[i][t] -= h;
                let fd = (oracle(&plus, &y, frozen).2 - oracle(&minus, &y, frozen).2) / (2.0 * h);
                assert!(rel_err(m.grad[i][t], fd) < 1e-4, "{mode:?} row {i} dim {t}: {} vs {fd}", m.grad[i][t]);
            }
        }
        checked += 1;
    }
}

#[test]
fn gradient_with_detached_margin_matches_finite_differences() {
    gradient_check(XiGradient::Detached);
}

#[test]
fn full_gradient_matches_finite_differences() {
    gradient_check(XiGradient::Full);
}

proptest! {
    #[test]
    fn permutation_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, y) = random_batch(&mut rng);
        let mut perm: Vec<usize> = (0..f.len()).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let pf: Vec<Vec<f64>> = perm.iter().map(|&i| f[i].clone()).collect();
        let py: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
        let a = mcl_loss(&rows(&f), &y, 2).unwrap();
        let b = mcl_loss(&rows(&pf), &py, 2).unwrap();
        prop_assert!(rel_err(a.l_margin, b.l_margin) < 1e-12);
        prop_assert!(rel_err(a.xi, b.xi) < 1e-12);
        for (k, &i) in perm.iter().enumerate() {
            for t in 0..f[0].len() {
                prop_assert!((a.grad[i][t] - b.grad[k][t]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scales_quadratically(seed in any::<u64>(), c in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, y) = random_batch(&mut rng);
        let g: Vec<Vec<f64>> = f.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
        let a = mcl_loss(&rows(&f), &y, 2).unwrap();
        let b = mcl_loss(&rows(&g), &y, 2).unwrap();
        let c2 = c * c;
        prop_assert!(rel_err(b.xi, c2 * a.xi) < 1e-12);
        prop_assert!(rel_err(b.l_p, c2 * a.l_p) < 1e-12);
        prop_assert!((b.l_n - c2 * a.l_n).abs() < 1e-12 * (1.0 + c2 * a.xi * f.len() as f64));
        prop_assert!(a.l_p >= 0.0 && a.l_n >= 0.0 && a.xi >= 0.0);
    }

    #[test]
    fn kl_shift_invariant(z in prop::collection::vec(-5.0f64..5.0, 2..6), c in -20.0f64..20.0) {
        let s: Vec<f64> = z.iter().map(|v| v + c).collect();
        let (a, _) = kl_uniform_loss(&[&z]).unwrap();
        let (b, _) = kl_uniform_loss(&[&s]).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a >= -1e-15);
    }
}

#[test]
fn kl_values_and_gradient() {
    let (u, _) = kl_uniform_loss(&[&[0.3, 0.3, 0.3]]).unwrap();
    assert!(u.abs() < 1e-15);
    let (v, _) = kl_uniform_loss(&[&[2f64.ln(), 0.0]]).unwrap();
    let expect = (2.0 / 3.0) * (4.0f64 / 3.0).ln() + (1.0 / 3.0) * (2.0f64 / 3.0).ln();
    assert!((v - expect).abs() < 1e-14);
    assert!((v - 0.0566).abs() < 5e-5);

    let z = [vec![0.5, -1.0, 2.0], vec![0.1, 0.2, -0.3]];
    let (_, g) = kl_uniform_loss(&[&z[0], &z[1]]).unwrap();
    let h = 1e-6;
    for r in 0..2 {
        for t in 0..3 {
            let mut p = z.clone();
            p[r][t] += h;
            let mut m = z.clone();
            m[r][t] -= h;
            let fd = (kl_uniform_loss(&[&p[0], &p[1]]).unwrap().0 - kl_uniform_loss(&[&m[0], &m[1]]).unwrap().0) / (2.0 * h);
            assert!(rel_err(g[r][t], fd) < 1e-6);
        }
    }
    assert!(kl_uniform_loss(&[&[1.0]]).is_err());
}

#[test]
fn ce_touches_only_id_rows() {
    let feats = vec![vec![0.1, 0.2], vec![0.3, -0.1], vec![1.0, 1.0], vec![0.9, 1.2]];
    let logits = vec![vec![1.0, 0.0], vec![0.2, 0.4], vec![3.0, -1.0], vec![0.0, 0.0]];
    let labels = [0, 1, 2, 2];
    for obj in Objective::ALL {
        let view = BatchView { features: rows(&feats), logits: rows(&logits), labels: &labels, n_id: 2 };
        let g = rejection_step(&view, obj).unwrap();
        let ood_logit_grad = g.dlogits[2..].iter().flatten().any(|v| *v != 0.0);
        assert_eq!(ood_logit_grad, obj == Objective::CeKl, "{obj}");
        let feat_grad = g.dfeature.iter().flatten().any(|v| *v != 0.0);
        assert_eq!(feat_grad, obj == Objective::CeMcl, "{obj}");
        let lb = LossBreakdown::from_step(&g.loss);
        assert!((lb.l_total - (lb.l_ce + lb.l_margin + lb.l_kl)).abs() < 1e-15);
    }
}

#[test]
fn objective_names_round_trip() {
    for o in Objective::ALL {
        assert_eq!(o.name().parse::<Objective>().unwrap(), o);
    }
    assert_eq!("ce_only".parse::<Objective>().unwrap(), Objective::Ce);
    assert!("mcl".parse::<Objective>().is_err());
}

fn short_tc() -> TrainConfig {
    TrainConfig { learning_rate: 2e-3, epochs: 1, batch_size: 8, seed: 4, ..TrainConfig::desk() }
}

#[test]
fn ce_without_surrogates_continues_classifier_training() {
    let f = fixture();
    let tc = short_tc();
    let rc = RejectionConfig { objective: Objective::Ce, b_o: 0, replace_masks: true };
    let a = train_rejection(f.params.clone(), &f.corpus, &[], &tc, &rc).unwrap();
    let b = train_classifier(f.params.clone(), &f.corpus, &tc).unwrap();
    assert_eq!(a.params.values, b.params.values);
    let ce: Vec<f64> = a.steps.iter().map(|s| s.l_ce).collect();
    let ce_b: Vec<f64> = b.steps.iter().map(|s| s.total).collect();
    assert_eq!(ce, ce_b);
}

#[test]
fn surrogate_requirements() {
    let f = fixture();
    let tc = short_tc();
    let rc = RejectionConfig::default();
    assert!(train_rejection(f.params.clone(), &f.corpus, &[], &tc, &rc).is_err());
    let rc0 = RejectionConfig { b_o: 0, ..RejectionConfig::default() };
    assert!(train_rejection(f.params.clone(), &f.corpus, &[], &tc, &rc0).is_err());
}

#[test]
fn mcl_training_is_deterministic_and_logs_margin() {
    let f = fixture();
    let set = construct_surrogate_set(&f.corpus.train, &f.params, &f.stats, &AttentionRanker, &Default::default()).unwrap();
    let tc = short_tc();
    let rc = RejectionConfig::default();
    let a = train_rejection(f.params.clone(), &f.corpus, &set.surrogates, &tc, &rc).unwrap();
    let b = train_rejection(f.params.clone(), &f.corpus, &set.surrogates, &tc, &rc).unwrap();
    assert_eq!(a.params.values, b.params.values);
    assert_eq!(a.params.config.num_classes, 3);
    assert!(a.steps.iter().all(|s| s.xi >= 0.0 && s.l_margin >= 0.0));
    assert!(a.steps.iter().any(|s| s.l_margin > 0.0));
    assert!(a.epochs[0].components.contains_key("l_margin"));
    let kl =
        train_rejection(f.params.clone(), &f.corpus, &set.surrogates, &tc, &RejectionConfig { objective: Objective::CeKl, ..rc }).unwrap();
    assert!(kl.steps.iter().all(|s| s.l_margin == 0.0 && s.l_kl >= 0.0));
}
