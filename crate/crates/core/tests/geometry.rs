mod support;

use apdi_core::geometry::{clip_box, decode_deltas, encode_deltas, iou_matrix};
use apdi_core::{iou, BBox, DeltaWeights};
use proptest::prelude::*;
use support::{bx, raster_iou};

#[test]
fn geometry_suite_passes() {
    let detail = support::geometry_suite().unwrap();
    assert!(!detail.is_empty());
}

#[test]
fn raster_oracle_on_touching_and_nested_boxes() {
    let cases = [
        (bx(0.0, 0.0, 4.0, 4.0), bx(4.0, 0.0, 8.0, 4.0)),
        (bx(0.0, 0.0, 8.0, 8.0), bx(2.0, 2.0, 4.0, 4.0)),
        (bx(1.0, 1.0, 3.0, 5.0), bx(1.0, 1.0, 3.0, 5.0)),
        (bx(0.0, 0.0, 5.0, 1.0), bx(0.0, 0.0, 1.0, 5.0)),
    ];
    for (a, b) in cases {
        assert_eq!(iou(&a, &b), raster_iou(&a, &b), "{a:?} {b:?}");
    }
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0..200.0f64, 0.0..200.0f64, 0.5..80.0f64, 0.5..80.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

fn sized_box(lo: f64, hi: f64) -> impl Strategy<Value = BBox> {
    (0.0..200.0f64, 0.0..200.0f64, lo..hi, lo..hi)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
    }

    // Side ratios stay below the decode clamp of 1000 / 16.
    #[test]
    fn encode_decode_roundtrips(a in sized_box(2.0, 100.0), b in sized_box(2.0, 100.0)) {
        let w = DeltaWeights::default();
        let back = decode_deltas(&a, &encode_deltas(&a, &b, &w).unwrap(), &w, None).unwrap();
        for (u, v) in back.to_array().iter().zip(b.to_array()) {
            prop_assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn clipped_boxes_stay_inside(a in arb_box()) {
        let bounds = bx(0.0, 0.0, 96.0, 96.0);
        let c = clip_box(&a, &bounds);
        prop_assert!(c.x1 >= 0.0 && c.y1 >= 0.0 && c.x2 <= 96.0 && c.y2 <= 96.0);
        prop_assert!(c.x1 <= c.x2 && c.y1 <= c.y2);
    }

    #[test]
    fn iou_matrix_matches_pairwise(boxes in prop::collection::vec(arb_box(), 0..8), gts in prop::collection::vec(arb_box(), 0..5)) {
        let m = iou_matrix(&boxes, &gts);
        prop_assert_eq!(m.rows(), boxes.len());
        prop_assert_eq!(m.cols(), gts.len());
        for (i, b) in boxes.iter().enumerate() {
            for (j, g) in gts.iter().enumerate() {
                prop_assert_eq!(m.get(i, j), iou(b, g));
            }
        }
    }
}
