//! Information-theoretic identities of the losses, the patch matcher against
//! a brute-force oracle and permutation invariance of bag pooling.

mod common;

use cmd_distill::autodiff::Tensor;
use cmd_distill::losses::{loss_total, match_patches};
use cmd_distill::mil::aggregate_bag;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{brute_force_match, cross_entropy, entropy, integer_rows, kl};

fn distribution(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, k).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn gibbs_inequality((p, q) in (2usize..12).prop_flat_map(|k| (distribution(k), distribution(k)))) {
        let ce = cross_entropy(&p, &q);
        prop_assert!(ce >= entropy(&p) - 1e-12);
        prop_assert!((ce - entropy(&p) - kl(&p, &q)).abs() < 1e-10);
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_itself((p, q) in (2usize..12).prop_flat_map(|k| (distribution(k), distribution(k)))) {
        prop_assert!(kl(&p, &q) >= -1e-12);
        prop_assert!(kl(&p, &p).abs() < 1e-12);
    }

    #[test]
    fn total_loss_is_linear_in_lambda(parts in prop::array::uniform4(0.0f64..5.0), l in 0.0f64..10.0) {
        let t = loss_total(parts[0], parts[1], parts[2], parts[3], l).unwrap();
        let base = loss_total(parts[0], parts[1], parts[2], parts[3], 0.0).unwrap();
        prop_assert!((t - base - l * (parts[2] + parts[3])).abs() < 1e-9);
    }
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

#[test]
fn matcher_equals_brute_force_including_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..1000 {
        let (ts, tt, d) = (rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(1..=8));
        let s = integer_rows(&mut rng, ts, d);
        let mut t = integer_rows(&mut rng, tt, d);
        if case % 3 == 0 && tt > 1 {
            t[tt - 1] = t[0].clone();
        }
        assert_eq!(
            match_patches(&to_tensor(&s), &to_tensor(&t)).unwrap(),
            brute_force_match(&s, &t),
            "case {case}"
        );
    }
}

proptest! {
    #[test]
    fn matcher_ignores_positive_row_scaling(
        s in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..8),
        t in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..8),
        scale in prop::collection::vec(0.1f64..10.0, 8),
    ) {
        let scaled: Vec<Vec<f64>> = s.iter().zip(&scale).map(|(r, c)| r.iter().map(|v| v * c).collect()).collect();
        prop_assert_eq!(
            match_patches(&to_tensor(&s), &to_tensor(&t)).unwrap(),
            match_patches(&to_tensor(&scaled), &to_tensor(&t)).unwrap()
        );
    }
}

#[test]
fn bag_pooling_is_bitwise_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let (t, k) = (rng.gen_range(1..=49), rng.gen_range(1..=16));
        let rows: Vec<Vec<f64>> = (0..t)
            .map(|_| (0..k).map(|_| rng.gen_range(-1e3..1e3)).collect())
            .collect();
        let mut perm = rows.clone();
        perm.shuffle(&mut rng);
        let a = aggregate_bag(&to_tensor(&rows)).unwrap();
        let b = aggregate_bag(&to_tensor(&perm)).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
