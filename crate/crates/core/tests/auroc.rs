use adtr::eval::{auroc, EvalError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pairwise definition: P(score⁺ > score⁻) + ½·P(tie).
fn pairwise(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn seeded_case(seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..120);
    loop {
        // Coarse levels force many ties.
        let levels = rng.gen_range(2..10);
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.4))).collect();
        if !labels.contains(&0) || !labels.contains(&1) {
            continue;
        }
        let scores = labels
            .iter()
            .map(|&l| (rng.gen_range(0..levels) as f64 + f64::from(l) * rng.gen_range(0.0..2.0)).floor() * 0.25)
            .collect();
        return (scores, labels);
    }
}

#[test]
fn matches_pairwise_oracle_on_fifty_seeded_sets() {
    let mut tied = 0;
    for seed in 0..50 {
        let (s, y) = seeded_case(seed);
        let mut sorted = s.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            tied += 1;
        }
        let got = auroc(&s, &y).unwrap();
        assert!((got - pairwise(&s, &y)).abs() <= 1e-12, "seed {seed}");
    }
    assert!(tied >= 40);
}

#[test]
fn monotone_transforms_leave_auroc_unchanged() {
    for seed in 0..50 {
        let (s, y) = seeded_case(seed);
        let base = auroc(&s, &y).unwrap();
        let transforms: [fn(f64) -> f64; 3] = [|x| 3.0 * x + 7.0, |x| x.exp(), |x| (x + 1.0).powi(3)];
        for t in transforms {
            let mapped: Vec<f64> = s.iter().map(|&x| t(x)).collect();
            assert_eq!(auroc(&mapped, &y).unwrap(), base, "seed {seed}");
        }
    }
}

#[test]
fn worked_examples() {
    assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
    assert_eq!(auroc(&[1.0, 1.0, 1.0, 1.0], &[0, 1, 0, 1]).unwrap(), 0.5);
    assert_eq!(auroc(&[0.0, 1.0], &[0, 1]).unwrap(), 1.0);
    assert!(matches!(auroc(&[0.2, 0.3], &[1, 1]), Err(EvalError::SingleClass { .. })));
    assert!(auroc(&[0.2, f64::NAN], &[0, 1]).is_err());
    assert!(auroc(&[0.2], &[0, 1]).is_err());
}

proptest! {
    #[test]
    fn flipping_labels_complements(scores in prop::collection::vec(0u8..6, 2..40), labels in prop::collection::vec(0u8..=1, 40)) {
        let y = &labels[..scores.len()];
        prop_assume!(y.contains(&0) && y.contains(&1));
        let s: Vec<f64> = scores.iter().map(|&v| f64::from(v)).collect();
        let flipped: Vec<u8> = y.iter().map(|&l| 1 - l).collect();
        let total = auroc(&s, y).unwrap() + auroc(&s, &flipped).unwrap();
        prop_assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn agrees_with_oracle(scores in prop::collection::vec(-3i8..3, 2..60), labels in prop::collection::vec(0u8..=1, 60)) {
        let y = &labels[..scores.len()];
        prop_assume!(y.contains(&0) && y.contains(&1));
        let s: Vec<f64> = scores.iter().map(|&v| f64::from(v) * 0.5).collect();
        prop_assert!((auroc(&s, y).unwrap() - pairwise(&s, y)).abs() <= 1e-12);
    }
}
