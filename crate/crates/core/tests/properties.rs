//! Randomized property checks for the geometric and policy primitives.

use dytx_core::data::crop::CropWindow;
use dytx_core::data::types::BoundingBox;
use dytx_core::evaluation::{pareto_front, TradeoffPoint};
use dytx_core::inference::select_exit;
use dytx_core::objectives::{giou_loss_var, iou_var};
use dytx_core::tape::Tape;
use proptest::prelude::*;

fn arb_box() -> impl Strategy<Value = BoundingBox> {
    (0.0..1.0f64, 0.0..1.0f64, 1e-3..1.0f64, 1e-3..1.0f64)
        .prop_map(|(cx, cy, w, h)| BoundingBox::new(cx, cy, w, h))
}

fn var_box(tape: &Tape<f64>, b: &BoundingBox) -> dytx_core::exits::BoxVars {
    use dytx_core::tensor::Tensor;
    let v = |x: f64| tape.var(Tensor::new(vec![1], vec![x]), true);
    dytx_core::exits::BoxVars {
        cx: v(b.cx),
        cy: v(b.cy),
        w: v(b.w),
        h: v(b.h),
    }
}

proptest! {
    #[test]
    fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let ab = a.iou(&b);
        let ba = b.iou(&a);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((a.iou(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn giou_never_exceeds_iou(a in arb_box(), b in arb_box()) {
        let g = a.giou(&b);
        prop_assert!(g <= a.iou(&b) + 1e-12);
        prop_assert!((-1.0..=1.0).contains(&g));
    }

    #[test]
    fn differentiable_losses_match_plain_geometry(a in arb_box(), b in arb_box()) {
        let tape: Tape<f64> = Tape::new();
        let pred = var_box(&tape, &a);
        let iou = iou_var(&tape, &pred, &b).unwrap();
        let gl = giou_loss_var(&tape, &pred, &b).unwrap();
        prop_assert!((tape.value(iou).data()[0] - a.iou(&b)).abs() < 1e-9);
        prop_assert!((tape.value(gl).data()[0] - (1.0 - a.giou(&b))).abs() < 1e-9);
    }

    #[test]
    fn pareto_front_sound_and_idempotent(
        pts in prop::collection::vec((1.0..500.0f64, 0.0..100.0f64), 1..60)
    ) {
        let points: Vec<TradeoffPoint> = pts
            .iter()
            .enumerate()
            .map(|(i, (s, p))| TradeoffPoint { speed: *s, precision: *p, label: format!("p{i}") })
            .collect();
        let front = pareto_front(&points);
        prop_assert!(!front.is_empty());
        // no front point is dominated by any input point
        for f in &front {
            for p in &points {
                let dominates = p.speed >= f.speed
                    && p.precision >= f.precision
                    && (p.speed > f.speed || p.precision > f.precision);
                prop_assert!(!dominates);
            }
        }
        // every non-front point is dominated by someone
        for p in &points {
            if front.iter().any(|f| f.label == p.label) {
                continue;
            }
            let covered = points.iter().any(|q| {
                q.speed >= p.speed
                    && q.precision >= p.precision
                    && (q.speed > p.speed || q.precision > p.precision)
            });
            prop_assert!(covered);
        }
        let again = pareto_front(&front);
        prop_assert_eq!(again.len(), front.len());
    }

    #[test]
    fn exit_rule_matches_threshold_definition(
        scores in prop::collection::vec(0.0..1.0f64, 3),
        tau in prop::collection::vec(-0.2..1.2f64, 2)
    ) {
        // first satisfied exit wins; the final exit accepts unconditionally
        let expected = (0..3)
            .find(|&k| k == 2 || scores[k] > tau[k])
            .unwrap();
        let mut taken = None;
        for k in 0..3 {
            if select_exit(k, scores[k], &tau, 3) {
                taken = Some(k);
                break;
            }
        }
        prop_assert_eq!(taken, Some(expected));
    }

    #[test]
    fn crop_mapping_round_trips(
        b in arb_box(),
        x0 in -20.0..120.0f64,
        y0 in -20.0..120.0f64,
        side in 4.0..200.0f64
    ) {
        let win = CropWindow { x0, y0, side, out_size: 64 };
        let fb = BoundingBox::new(
            x0 + b.cx * side,
            y0 + b.cy * side,
            b.w * side,
            b.h * side,
        );
        let crop = win.box_to_crop(&fb);
        let back = win.box_to_frame(&crop);
        prop_assert!((back.cx - fb.cx).abs() < 1e-9);
        prop_assert!((back.cy - fb.cy).abs() < 1e-9);
        prop_assert!((back.w - fb.w).abs() < 1e-9);
        prop_assert!((back.h - fb.h).abs() < 1e-9);
    }
}
