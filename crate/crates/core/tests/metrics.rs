use proptest::prelude::*;

use mrgr_core::eval::{ndcg_at_k, percentile, rank_of, ranked_list, recall_at_k};
use mrgr_numerics::{kernels, Tensor};

/// (rank, k, recall, ndcg), worked by hand.
const TABLE: [(usize, usize, f64, f64); 10] = [
    (1, 1, 1.0, 1.0),
    (1, 5, 1.0, 1.0),
    (2, 1, 0.0, 0.0),
    (2, 5, 1.0, 0.630_929_753_571_457_4),
    (3, 5, 1.0, 0.5),
    (4, 5, 1.0, 0.430_676_558_073_393),
    (5, 5, 1.0, 0.386_852_807_234_541_6),
    (6, 5, 0.0, 0.0),
    (7, 5, 0.0, 0.0),
    (7, 10, 1.0, 0.333_333_333_333_333_3),
];

#[test]
fn hand_computed_table() {
    for (rank, k, r, n) in TABLE {
        assert_eq!(recall_at_k(rank, k).unwrap(), r, "recall rank {rank} k {k}");
        assert!(
            (ndcg_at_k(rank, k).unwrap() - n).abs() < 1e-15,
            "ndcg rank {rank} k {k}"
        );
    }
    assert_eq!(ndcg_at_k(3, 5).unwrap(), 0.5);
    assert!(recall_at_k(1, 0).is_err());
    assert!(ndcg_at_k(0, 5).is_err());
}

#[test]
fn kl_of_point_mass_against_uniform() {
    let p = Tensor::vector(vec![1.0, 0.0]).unwrap();
    let q = Tensor::vector(vec![0.5, 0.5]).unwrap();
    assert!((kernels::kl_div(&p, &q).unwrap() - std::f64::consts::LN_2).abs() < 1e-10);
}

#[test]
fn quartiles_interpolate_linearly() {
    let v = [4.0, 1.0, 3.0, 2.0];
    assert!((percentile(&v, 25.0).unwrap() - 1.75).abs() < 1e-15);
    assert!((percentile(&v, 50.0).unwrap() - 2.5).abs() < 1e-15);
    assert!((percentile(&v, 75.0).unwrap() - 3.25).abs() < 1e-15);
}

proptest! {
    #[test]
    fn metrics_grow_with_k(rank in 1usize..200, k in 1usize..100) {
        prop_assert!(recall_at_k(rank, k).unwrap() <= recall_at_k(rank, k + 1).unwrap());
        prop_assert!(ndcg_at_k(rank, k).unwrap() <= ndcg_at_k(rank, k + 1).unwrap());
        prop_assert!(ndcg_at_k(rank, k).unwrap() <= recall_at_k(rank, k).unwrap());
    }

    #[test]
    fn rank_counts_strictly_better_items(scores in prop::collection::vec(-3i32..3, 1..40), t_frac in 0.0f64..1.0) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let t = ((t_frac * scores.len() as f64) as usize).min(scores.len() - 1);
        let better = scores.iter().filter(|&&s| s > scores[t]).count();
        let tied_before = scores[..t].iter().filter(|&&s| s == scores[t]).count();
        let rank = rank_of(&scores, t);
        prop_assert_eq!(rank, 1 + better + tied_before);
        prop_assert_eq!(ranked_list(&scores)[rank - 1], t);
    }
}
