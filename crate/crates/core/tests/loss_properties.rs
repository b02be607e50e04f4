use ndarray::{Array2, Array3};
use proptest::prelude::*;

use styleseg::config::EdgeNorm;
use styleseg::segmenter::loss::{loss_composite, SegLossWeights};

fn probs_from(logits: &[f64], h: usize, w: usize) -> Array3<f64> {
    let mut p = Array3::from_shape_fn((4, h, w), |(k, i, j)| logits[(k * h + i) * w + j].exp());
    for i in 0..h {
        for j in 0..w {
            let z: f64 = (0..4).map(|k| p[[k, i, j]]).sum();
            for k in 0..4 {
                p[[k, i, j]] /= z;
            }
        }
    }
    p
}

fn case() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<u8>)> {
    (2usize..7, 2usize..7).prop_flat_map(|(h, w)| {
        (
            Just(h),
            Just(w),
            prop::collection::vec(-4.0..4.0f64, 4 * h * w),
            prop::collection::vec(0u8..4, h * w),
        )
    })
}

fn weights() -> impl Strategy<Value = SegLossWeights> {
    (prop::array::uniform4(0.05..1.0f64), 0.0..2.0f64, prop::bool::ANY).prop_map(|(omega, lambda, sq)| SegLossWeights {
        omega,
        lambda,
        edge_norm: if sq { EdgeNorm::SquaredEuclidean } else { EdgeNorm::Euclidean },
    })
}

proptest! {
    #[test]
    fn composite_loss_is_nonnegative((h, w, logits, labels) in case(), wts in weights()) {
        let p = probs_from(&logits, h, w);
        let y = Array2::from_shape_vec((h, w), labels).unwrap();
        let (l, g) = loss_composite(p.view(), y.view(), &wts).unwrap();
        prop_assert!(l >= 0.0 && l.is_finite());
        prop_assert!(g.iter().all(|v| v.is_finite()));
    }

    /// Relabelling the foreground classes, permuting the probability channels
    /// and class weights the same way, leaves the loss unchanged.
    #[test]
    fn composite_loss_is_permutation_consistent(
        (h, w, logits, labels) in case(),
        wts in weights(),
        perm in Just(vec![1u8, 2, 3]).prop_shuffle(),
    ) {
        let p = probs_from(&logits, h, w);
        let y = Array2::from_shape_vec((h, w), labels).unwrap();
        let map = |k: usize| if k == 0 { 0 } else { perm[k - 1] as usize };

        let mut pp = Array3::zeros(p.dim());
        for ((k, i, j), v) in p.indexed_iter() {
            pp[[map(k), i, j]] = *v;
        }
        let yp = y.mapv(|c| map(c as usize) as u8);
        let mut wp = wts;
        for k in 0..4 {
            wp.omega[map(k)] = wts.omega[k];
        }

        let (l0, _) = loss_composite(p.view(), y.view(), &wts).unwrap();
        let (l1, _) = loss_composite(pp.view(), yp.view(), &wp).unwrap();
        prop_assert!((l0 - l1).abs() <= 1e-9 * (1.0 + l0.abs()), "{l0} vs {l1}");
    }
}
