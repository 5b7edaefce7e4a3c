use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regionspot::alignment::{focal_loss, matching_scores, predict_labels, rank_row, MatchingScores, RegionTargets};
use regionspot::encoders::TextEmbeddingTable;
use regionspot::fusion::RegionSemanticTokens;

fn names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("c{i}")).collect()
}

#[test]
fn matching_scores_match_normalized_matmul_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = 6;
    let tokens: Array2<f64> = Array2::from_shape_fn((3, c), |_| rng.random_range(-2.0..2.0));
    let mut emb: Array2<f32> = Array2::from_shape_fn((5, c), |_| rng.random_range(-1.0..1.0));
    for mut r in emb.outer_iter_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    let table = TextEmbeddingTable {
        embeddings: emb.clone(),
        category_names: names(5),
        template: "{}".into(),
    };
    let temperature = 14.3;
    let scores = matching_scores(&RegionSemanticTokens { tokens: tokens.clone() }, &table, temperature).unwrap();
    for i in 0..3 {
        let norm: f64 = (0..c).map(|j| tokens[[i, j]].powi(2)).sum::<f64>().sqrt();
        for k in 0..5 {
            let dot: f64 = (0..c).map(|j| tokens[[i, j]] / norm * emb[[k, j]] as f64).sum();
            assert!((scores.logits[[i, k]] - temperature * dot).abs() < 1e-6);
        }
    }
}

#[test]
fn predict_labels_matches_full_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = Array2::from_shape_fn((4, 6), |_| (rng.random_range(-3.0f64..3.0) * 4.0).round() / 4.0);
    let scores = MatchingScores {
        logits: logits.clone(),
        temperature: 1.0,
    };
    let got = predict_labels(&scores, &names(6), 3).unwrap();
    for (i, row) in got.iter().enumerate() {
        // oracle: sort (-logit, index) pairs lexicographically
        let mut pairs: Vec<(f64, usize)> = (0..6).map(|k| (-logits[[i, k]], k)).collect();
        pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expected: Vec<String> = pairs[..3].iter().map(|&(_, k)| format!("c{k}")).collect();
        let names: Vec<String> = row.iter().map(|l| l.category.clone()).collect();
        assert_eq!(names, expected);
        for l in row {
            let z = logits[[i, l.index]];
            assert!((l.score - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
        }
    }
}

#[test]
fn top_k_is_clamped_to_vocabulary() {
    let scores = MatchingScores {
        logits: Array2::from_elem((2, 3), 0.0f32),
        temperature: 1.0,
    };
    let got = predict_labels(&scores, &names(3), 10).unwrap();
    assert!(got.iter().all(|r| r.len() == 3));
    assert_eq!(got[0][0].category, "c0");
    assert_eq!(got[0][1].category, "c1");
}

fn logits_strategy() -> impl Strategy<Value = (Vec<f64>, usize, usize)> {
    (1usize..5, 1usize..6).prop_flat_map(|(n, k)| (prop::collection::vec(-8.0f64..8.0, n * k), Just(n), Just(k)))
}

proptest! {
    #[test]
    fn focal_loss_is_nonnegative_and_monotone_in_positive_logits(
        (values, n, k) in logits_strategy(),
        gamma in 0.0f64..3.0,
        alpha in 0.05f64..0.95,
        bump in 0.0f64..3.0,
    ) {
        let logits = Array2::from_shape_vec((n, k), values).unwrap();
        let labels: Vec<Option<usize>> = (0..n).map(|i| if i % 2 == 0 { Some(i % k) } else { None }).collect();
        let targets = RegionTargets::from_labels(&labels, k).unwrap();
        let base = focal_loss(&MatchingScores { logits: logits.clone(), temperature: 1.0 }, &targets, alpha, gamma).unwrap();
        prop_assert!(base.value >= 0.0);
        // raise the logit of the first positive element
        let mut raised = logits.clone();
        raised[[0, 0]] += bump;
        let after = focal_loss(&MatchingScores { logits: raised, temperature: 1.0 }, &targets, alpha, gamma).unwrap();
        prop_assert!(after.value <= base.value + 1e-12);
        // and lowering a negative element's logit never raises it either
        if n > 1 {
            let mut lowered = logits.clone();
            lowered[[1, 0]] -= bump;
            let after = focal_loss(&MatchingScores { logits: lowered, temperature: 1.0 }, &targets, alpha, gamma).unwrap();
            prop_assert!(after.value <= base.value + 1e-12);
        }
    }

    #[test]
    fn ranking_is_invariant_to_increasing_transforms((values, n, k) in logits_strategy(), scale in 0.01f64..50.0, shift in -5.0f64..5.0) {
        let logits = Array2::from_shape_vec((n, k), values).unwrap();
        let transformed = logits.mapv(|v| (v * scale + shift).tanh() * 3.0 + v * 1e-3);
        for i in 0..n {
            prop_assert_eq!(rank_row(logits.row(i)), rank_row(transformed.row(i)));
        }
        // a positive temperature only rescales rows
        let a = predict_labels(&MatchingScores { logits: logits.clone(), temperature: 1.0 }, &names(k), 1).unwrap();
        let b = predict_labels(&MatchingScores { logits: logits.mapv(|v| v * scale), temperature: scale }, &names(k), 1).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            prop_assert_eq!(&ra[0].category, &rb[0].category);
        }
    }
}
