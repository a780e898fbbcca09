mod common;

use common::*;
use hidden_fold::supermask::{kept_count, topk_mask, Supermask};
use hidden_fold::tensor::Tensor;
use proptest::prelude::*;

#[test]
fn straight_through_matches_continuous_mask_derivative() {
    for seed in 0..5 {
        let e = straight_through_err(seed);
        assert!(e <= 1e-6, "seed {}: {:e}", seed, e);
    }
}

#[test]
fn topk_contract_on_random_tensors() {
    topk_properties(11, 1000).unwrap();
}

#[test]
fn folded_stage_equals_unrolled_chain() {
    for seed in 0..2 {
        let f = fold_vs_unroll(seed);
        assert!(f.forward_bitwise, "forward differs");
        assert!(f.input_grad_bitwise, "input gradient differs");
        assert!(f.ubn_grad_bitwise, "per-iteration BN gradients differ");
        assert!(f.score_grad_err <= 1e-10, "{:e}", f.score_grad_err);
    }
}

#[test]
fn eight_weight_mask_packs_to_one_byte() {
    let bits = [true, false, false, true, true, false, false, false];
    let m = Supermask::from_bits(&[8], bits.to_vec()).unwrap();
    assert_eq!(m.pack(), vec![0b0001_1001]);
}

proptest! {
    #[test]
    fn pack_unpack_round_trip(bits in prop::collection::vec(any::<bool>(), 1..200)) {
        let m = Supermask::from_bits(&[bits.len()], bits.clone()).unwrap();
        let packed = m.pack();
        prop_assert_eq!(packed.len(), bits.len().div_ceil(8));
        prop_assert_eq!(Supermask::unpack(&[bits.len()], &packed).unwrap(), m);
    }

    #[test]
    fn mask_bytes_do_not_depend_on_density(n in 10usize..500, k1 in 100u16..=1000, k2 in 100u16..=1000) {
        let scores = Tensor::<f64>::from_vec(&[n], (0..n).map(|i| (i * 7919 % 263) as f64).collect()).unwrap();
        let a = topk_mask(&scores, k1).unwrap().pack();
        let b = topk_mask(&scores, k2).unwrap().pack();
        prop_assert_eq!(a.len(), b.len());
        prop_assert_eq!(topk_mask(&scores, k1).unwrap().popcount(), kept_count(n, k1));
    }
}
