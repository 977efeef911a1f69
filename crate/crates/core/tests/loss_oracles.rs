//! The contrastive loss against a direct softmax computation, and its
//! invariances.

use cgc_autodiff::{Graph, Tensor};
use cgc_core::cgcloss::{cgc_loss, cgc_query_losses, l2_consistency_loss, CgcBatch, EPS};
use proptest::prelude::*;

fn brute_force(a: &[Vec<f64>], c: &[Vec<f64>], tau: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let sim = |x: &[f64], y: &[f64]| {
        x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / (norm(x) * norm(y) + EPS)
    };
    let n = a.len();
    (0..n)
        .map(|i| {
            let denom: f64 = (0..n).map(|j| (sim(&a[i], &c[j]) / tau).exp()).sum();
            -((sim(&a[i], &c[i]) / tau).exp() / denom).ln()
        })
        .sum()
}

fn stack(rows: &[Vec<f64>], h: usize, w: usize) -> Tensor {
    Tensor::new(vec![rows.len(), h, w], rows.concat()).unwrap()
}

fn loss(a: &[Vec<f64>], c: &[Vec<f64>], tau: f64, h: usize, w: usize) -> f64 {
    let g = Graph::new();
    let batch = CgcBatch::new(g.constant(stack(a, h, w)), g.constant(stack(c, h, w)), tau).unwrap();
    cgc_loss(&batch).unwrap().item().unwrap()
}

fn maps(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.0..1.0f64, d), n)
}

fn pair_sets() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (1usize..=8).prop_flat_map(|n| (maps(n, 12), maps(n, 12)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matches_direct_softmax((a, c) in pair_sets(), tau in 0.1..2.0f64) {
        let ours = loss(&a, &c, tau, 3, 4);
        let oracle = brute_force(&a, &c, tau);
        prop_assert!((ours - oracle).abs() <= 1e-6, "{ours} vs {oracle}");
        prop_assert!(ours >= 0.0);
    }

    #[test]
    fn invariant_under_joint_permutation(
        (a, c) in pair_sets(),
        seed in any::<u64>(),
        tau in 0.1..2.0f64,
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut order: Vec<usize> = (0..a.len()).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let pa: Vec<_> = order.iter().map(|&i| a[i].clone()).collect();
        let pc: Vec<_> = order.iter().map(|&i| c[i].clone()).collect();
        let before = loss(&a, &c, tau, 3, 4);
        prop_assert!((before - loss(&pa, &pc, tau, 3, 4)).abs() <= 1e-8);
    }

    #[test]
    fn invariant_under_positive_scaling(
        (a, c) in pair_sets(),
        scales in prop::collection::vec(0.5..5.0f64, 16),
        tau in 0.1..2.0f64,
    ) {
        // Keep every map away from zero so the norm guard is negligible.
        let lift = |m: &Vec<Vec<f64>>| m.iter().map(|r| r.iter().map(|v| v + 0.5).collect()).collect::<Vec<Vec<f64>>>();
        let (a, c) = (lift(&a), lift(&c));
        let scale = |m: &[Vec<f64>], off: usize| m
            .iter()
            .enumerate()
            .map(|(i, r)| r.iter().map(|v| v * scales[(off + i) % 16]).collect())
            .collect::<Vec<Vec<f64>>>();
        let before = loss(&a, &c, tau, 3, 4);
        let after = loss(&scale(&a, 0), &scale(&c, 8), tau, 3, 4);
        prop_assert!((before - after).abs() <= 1e-8, "{before} vs {after}");
    }

    #[test]
    fn l2_term_is_zero_for_proportional_pairs(a in maps(4, 6), s in 0.5..4.0f64) {
        let a: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v + 0.1).collect()).collect();
        let p: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v * s).collect()).collect();
        let g = Graph::new();
        let l = l2_consistency_loss(&g.constant(stack(&a, 2, 3)), &g.constant(stack(&p, 2, 3))).unwrap();
        prop_assert!(l.item().unwrap().abs() < 1e-12);
    }
}

#[test]
fn single_query_costs_nothing() {
    let a = vec![vec![0.3, 0.1, 0.0, 0.9]];
    let c = vec![vec![0.0, 1.0, 0.2, 0.0]];
    assert_eq!(loss(&a, &c, 0.5, 2, 2), 0.0);
}

#[test]
fn equal_similarities_give_log_n_per_query() {
    for n in [2usize, 5, 8] {
        let row = vec![0.2, 0.7, 0.1, 0.4];
        let a = vec![row.clone(); n];
        let g = Graph::new();
        let batch = CgcBatch::new(g.constant(stack(&a, 2, 2)), g.constant(stack(&a, 2, 2)), 0.5).unwrap();
        let per = cgc_query_losses(&batch).unwrap().into_value();
        for &l in per.data() {
            assert!((l - (n as f64).ln()).abs() <= 1e-9, "n = {n}: {l}");
        }
    }
}

#[test]
fn matching_pairs_beat_mismatched_pairs() {
    let a = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]];
    let swapped = vec![a[1].clone(), a[0].clone()];
    assert!(loss(&a, &a, 0.5, 2, 2) < loss(&a, &swapped, 0.5, 2, 2));
}
