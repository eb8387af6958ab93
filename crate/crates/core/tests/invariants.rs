//! Randomised structural invariants.

use mmvit::attention::{mca_shift_merge, AttentionScope, ClsPolicy};
use mmvit::tensor::{Rng, Tape, Tensor};
use mmvit::tokenize::{patchify, unpatchify, FieldDims, TokenField};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patch_round_trip(c in 1usize..4, gh in 1usize..4, gw in 1usize..4, p in 1usize..6, seed in any::<u64>()) {
        let frame = Tensor::rand_uniform(&[c, gh * p, gw * p], -1.0, 1.0, &mut Rng::new(seed));
        let rows = patchify(&frame, p).unwrap();
        prop_assert_eq!(rows.shape(), &[gh * gw, c * p * p]);
        prop_assert_eq!(unpatchify(&rows, c, gh * p, gw * p, p).unwrap(), frame);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let x = Tensor::rand_uniform(&[rows, cols], -scale, scale, &mut Rng::new(seed));
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax_rows(v);
        for r in 0..rows {
            let row = tape.value(s).row(r);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn key_sets_are_symmetric_for_partition_scopes(frames in 1usize..4, gh in 1usize..4, gw in 1usize..4) {
        // Every within-group scope is an equivalence relation on patch tokens.
        let dims = FieldDims { modalities: 4, frames, grid_h: gh, grid_w: gw, width: 4 };
        for scope in [
            AttentionScope::JointStm,
            AttentionScope::TimeAcrossModalities,
            AttentionScope::SpaceAcrossModalities,
            AttentionScope::TimeWithinModality,
            AttentionScope::SpaceWithinModality,
            AttentionScope::Modality,
        ] {
            let sets = scope.key_sets(&dims, ClsPolicy::Global).unwrap();
            for q in 1..dims.rows() {
                prop_assert!(sets[q].contains(&q));
                prop_assert!(sets[q].contains(&0));
                for &k in sets[q].iter().filter(|&&k| k != 0) {
                    prop_assert!(sets[k].contains(&q));
                }
            }
        }
    }

    #[test]
    fn shift_merge_preserves_modality_sum_of_quarters(frames in 1usize..3, n in 1usize..4, q in 1usize..3, seed in any::<u64>()) {
        let d = 4 * q;
        let mut rng = Rng::new(seed);
        let tokens = Tensor::rand_uniform(&[4, frames, n, d], -1.0, 1.0, &mut rng);
        let field = TokenField::new(tokens, Tensor::zeros(&[d]), (1, n)).unwrap();
        let out = mca_shift_merge(&field).unwrap();
        // The mix only permutes quarters among the modalities at one (t, p),
        // so the total over modalities doubles.
        for t in 0..frames {
            for p in 0..n {
                let total = |f: &TokenField| -> f64 { (0..4).map(|s| f.token(s, t, p).iter().sum::<f64>()).sum() };
                prop_assert!((total(&out) - 2.0 * total(&field)).abs() < 1e-12);
            }
        }
    }
}
