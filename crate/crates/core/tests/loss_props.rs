use proptest::prelude::*;
use thinseg_core::losses::{
    bce, bce_with_logits, cl_dice, combined_loss, soft_dice, soft_skeleton_of, LossEps, LossWeights,
    SkeletonConfig,
};
use thinseg_core::metrics::{max_inscribed_radius, Mask};
use thinseg_core::{Tape, Tensor};

fn pair() -> impl Strategy<Value = (Tensor, Tensor)> {
    (2usize..9, 2usize..9).prop_flat_map(|(h, w)| {
        (
            prop::collection::vec(0.0f64..=1.0, h * w),
            prop::collection::vec(any::<bool>(), h * w),
        )
            .prop_map(move |(p, t)| {
                let t = t.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
                (Tensor::new([1, h, w], p).unwrap(), Tensor::new([1, h, w], t).unwrap())
            })
    })
}

fn transpose(t: &Tensor) -> Tensor {
    let (h, w) = t.plane_dims().unwrap();
    let d = t.data();
    Tensor::from_fn([1, w, h], |i| d[(i % h) * w + i / h]).unwrap()
}

struct Terms {
    bce: f64,
    dice: f64,
    cl_dice: f64,
}

fn terms(pred: &Tensor, target: &Tensor) -> Terms {
    let eps = LossEps::default();
    let cfg = SkeletonConfig::default();
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let b = bce(&mut tape, p, target, eps.bce).unwrap();
    let d = soft_dice(&mut tape, p, target, eps.smooth).unwrap();
    let c = cl_dice(&mut tape, p, target, &cfg, eps.smooth).unwrap();
    Terms {
        bce: tape.item(b).unwrap(),
        dice: tape.item(d).unwrap(),
        cl_dice: tape.item(c).unwrap(),
    }
}

fn total(pred: &Tensor, target: &Tensor, w: &LossWeights) -> f64 {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let l = combined_loss(&mut tape, p, target, w, &SkeletonConfig::default(), &LossEps::default()).unwrap();
    l.total_value(&tape)
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn losses_are_finite_nonnegative_and_bounded((pred, target) in pair()) {
        let t = terms(&pred, &target);
        for v in [t.bce, t.dice, t.cl_dice] {
            prop_assert!(v.is_finite() && v >= 0.0);
        }
        prop_assert!(t.dice <= 1.0 + 1e-6);
        prop_assert!(t.cl_dice <= 1.0 + 1e-6);
        prop_assert!(total(&pred, &target, &LossWeights::default()) >= 0.0);
    }

    #[test]
    fn transposing_both_inputs_leaves_losses_unchanged((pred, target) in pair()) {
        let a = terms(&pred, &target);
        let b = terms(&transpose(&pred), &transpose(&target));
        prop_assert!(close(a.bce, b.bce, 1e-12));
        prop_assert!(close(a.dice, b.dice, 1e-12));
        prop_assert!(close(a.cl_dice, b.cl_dice, 1e-12));
    }

    #[test]
    fn combined_loss_is_linear_in_weights(
        (pred, target) in pair(),
        w1 in prop::array::uniform3(0.0f64..2.0),
        w2 in prop::array::uniform3(0.0f64..2.0),
    ) {
        let a = LossWeights::new(w1[0], w1[1], w1[2], 0.0).unwrap();
        let b = LossWeights::new(w2[0], w2[1], w2[2], 0.0).unwrap();
        let ab = LossWeights::new(w1[0] + w2[0], w1[1] + w2[1], w1[2] + w2[2], 0.0).unwrap();
        let sum = total(&pred, &target, &a) + total(&pred, &target, &b);
        prop_assert!((total(&pred, &target, &ab) - sum).abs() <= 1e-12 * sum.abs().max(1.0));
    }

    #[test]
    fn fused_logit_bce_matches_clamped_bce(
        (logits, target) in (2usize..9, 2usize..9).prop_flat_map(|(h, w)| (
            prop::collection::vec(-8.0f64..8.0, h * w),
            prop::collection::vec(any::<bool>(), h * w),
        ).prop_map(move |(z, t)| {
            let t = t.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
            (Tensor::new([1, h, w], z).unwrap(), Tensor::new([1, h, w], t).unwrap())
        }))
    ) {
        let mut tape = Tape::new();
        let z = tape.constant(logits);
        let fused = bce_with_logits(&mut tape, z, &target).unwrap();
        let p = tape.sigmoid(z).unwrap();
        let clamped = bce(&mut tape, p, &target, LossEps::default().bce).unwrap();
        let (a, b) = (tape.item(fused).unwrap(), tape.item(clamped).unwrap());
        prop_assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn skeleton_stops_growing_past_inscribed_radius(
        (h, w, bits) in (2usize..10, 2usize..10)
            .prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(any::<bool>(), h * w)))
    ) {
        let mask = Mask::new(h, w, bits).unwrap();
        let x = mask.to_tensor();
        let start = (max_inscribed_radius(&mask).ceil() as usize).max(1);
        let mut prev = soft_skeleton_of(&x, &SkeletonConfig::new(start).unwrap()).unwrap();
        for k in start + 1..start + 4 {
            let next = soft_skeleton_of(&x, &SkeletonConfig::new(k).unwrap()).unwrap();
            for (a, b) in prev.data().iter().zip(next.data()) {
                prop_assert!(*b <= *a + 1e-6);
            }
            prev = next;
        }
    }
}

fn sample() -> (Tensor, Tensor) {
    let target = Tensor::from_fn([1, 12, 12], |i| if i / 12 == 5 || i % 12 == 3 { 1.0 } else { 0.0 }).unwrap();
    let pred = Tensor::from_fn([1, 12, 12], |i| 0.05 + 0.9 * ((i * 37 % 101) as f64 / 101.0)).unwrap();
    (pred, target)
}

#[test]
fn perfect_prediction_has_near_zero_loss() {
    let (_, target) = sample();
    assert!(total(&target, &target, &LossWeights::default()).abs() < 1e-6);
}

#[test]
fn single_term_weights_reduce_to_that_term() {
    let (pred, target) = sample();
    let t = terms(&pred, &target);
    assert_eq!(total(&pred, &target, &LossWeights::new(1.0, 0.0, 0.0, 0.0).unwrap()), t.bce);
    let mixed = total(&pred, &target, &LossWeights::new(0.0, 1.0, 0.5, 0.0).unwrap());
    assert!(close(mixed, t.dice + 0.5 * t.cl_dice, 1e-12));
}

#[test]
fn default_weights_equal_weighted_term_sum() {
    let (pred, target) = sample();
    let t = terms(&pred, &target);
    let expected = 1.0 * t.bce + 1.0 * t.dice + 0.5 * t.cl_dice;
    assert!(close(total(&pred, &target, &LossWeights::default()), expected, 1e-12));
}

#[test]
fn boundary_weight_is_rejected() {
    assert!(matches!(
        LossWeights::new(1.0, 1.0, 0.5, 0.1),
        Err(thinseg_core::Error::BoundaryLossUnsupported)
    ));
}
