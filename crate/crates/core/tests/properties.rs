use proptest::prelude::*;

use fsdet::boxes::loss_box_uncertainty;
use fsdet::geometry::{decode_offsets, encode_offsets, iou, SideBox};
use fsdet::mask::{BinaryMask, MaskGrid};
use fsdet::probit::{predictive_probit, ActivationGaussian};
use fsdet::scalar::{softplus, softplus_inv};
use fsdet::world::{evaluate_ap, nms, ApMode, ClassGroups, Detection, Ellipse, EvalScene, SceneObject};

fn side_box() -> impl Strategy<Value = SideBox<f64>> {
    (0.0..0.8f64, 0.0..0.8f64, 0.02..0.2f64, 0.02..0.2f64)
        .prop_map(|(l, t, w, h)| SideBox::new(l, t, l + w, t + h).unwrap())
}

fn detections() -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((0..3usize, 0.0..1.0f64, side_box()), 0..12).prop_map(|v| {
        v.into_iter()
            .map(|(class, score, bx)| Detection {
                class,
                score,
                bx,
                mask: None,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn iou_is_symmetric_bounded_and_translation_invariant(a in side_box(), b in side_box(), dx in -0.1..0.1f64, dy in -0.1..0.1f64) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert_eq!(iou(&a, &a), 1.0);
        let moved = iou(&a.translate(dx, dy), &b.translate(dx, dy));
        prop_assert!((moved - v).abs() < 1e-12);
    }

    #[test]
    fn nms_keeps_a_non_overlapping_subset(dets in detections(), threshold in 0.1..0.9f64) {
        let kept = nms(dets.clone(), threshold);
        prop_assert!(kept.len() <= dets.len());
        for k in &kept {
            prop_assert!(dets.contains(k));
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.class != b.class || iou(&a.bx, &b.bx) <= threshold);
            }
        }
    }

    #[test]
    fn ap_ignores_monotone_score_changes(dets in detections(), gts in prop::collection::vec((0..3usize, side_box()), 1..5)) {
        let objects: Vec<SceneObject> = gts
            .into_iter()
            .map(|(class, bbox)| SceneObject { class, bbox, visible: bbox, occluded_side: None, mask: Ellipse::inscribed(&bbox) })
            .collect();
        let rescaled: Vec<Detection> = dets.iter().cloned().map(|mut d| { d.score = 0.1 + 0.5 * d.score * d.score; d }).collect();
        let groups = ClassGroups { base: vec![0, 1], new: vec![2] };
        let eval = |d: &[Detection]| evaluate_ap(&[EvalScene { objects: &objects, detections: d }], &groups, ApMode::Box, 32);
        prop_assert_eq!(eval(&dets), eval(&rescaled));
    }

    #[test]
    fn probit_predictive_is_a_symmetric_monotone_probability(m in -8.0..8.0f64, v in 0.0..50.0f64, dm in 0.01..2.0f64) {
        let p = |m: f64| predictive_probit(ActivationGaussian::new(m, v).unwrap());
        prop_assert!(p(m) > 0.0 && p(m) < 1.0);
        prop_assert!((p(m) + p(-m) - 1.0).abs() < 1e-12);
        prop_assert!(p(m + dm) >= p(m));
        let wider = predictive_probit(ActivationGaussian::new(m, v + 1.0).unwrap());
        prop_assert!((wider - 0.5).abs() <= (p(m) - 0.5).abs() + 1e-15);
    }

    #[test]
    fn uncertainty_loss_is_bounded_below_by_the_residual(m in prop::array::uniform4(-2.0..2.0f64), gt in prop::array::uniform4(-2.0..2.0f64), u in prop::array::uniform4(0.01..3.0f64)) {
        let l = loss_box_uncertainty(&m, &u, &gt).unwrap();
        let floor: f64 = (0..4).map(|k| (m[k] - gt[k]).abs()).sum();
        prop_assert!(l >= floor - 1e-12);
        let at_min: [f64; 4] = std::array::from_fn(|k| (m[k] - gt[k]).abs().sqrt().max(1e-9));
        prop_assert!((loss_box_uncertainty(&m, &at_min, &gt).unwrap() - floor).abs() < 1e-6);
    }

    #[test]
    fn softplus_inverts(x in -20.0..40.0f64) {
        let y = softplus(x);
        prop_assert!(y > 0.0);
        prop_assert!((softplus_inv(y) - x).abs() < 1e-8 * x.abs().max(1.0));
    }

    #[test]
    fn offsets_roundtrip(p in side_box(), t in side_box()) {
        let back = decode_offsets(&p, &encode_offsets(&p, &t).unwrap()).unwrap();
        for (a, b) in back.sides().iter().zip(t.sides()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_rle_roundtrip(bits in prop::collection::vec(any::<bool>(), 49)) {
        let m: BinaryMask = MaskGrid::new(7, bits).unwrap();
        prop_assert_eq!(BinaryMask::from_rle(7, &m.to_rle()).unwrap(), m);
    }
}
