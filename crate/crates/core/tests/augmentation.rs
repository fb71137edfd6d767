mod support;

use apdi_core::augment::{
    augment_proposals, cascade_stage_inputs, ibbr_refine, refine, CascadeSettings,
};
use apdi_core::data::GtObject;
use apdi_core::features::{feature_len, RoiPooler};
use apdi_core::matching::{cascade_thresholds, match_proposals, ThresholdSchedule};
use apdi_core::{iou, DeltaWeights, GroundTruth, HeadModel, ProposalSet, Provenance};
use support::{random_box, random_image, random_model, rng};

fn assert_close(a: &[apdi_core::BBox], b: &[apdi_core::BBox]) {
    assert_eq!(a.len(), b.len());
    for (u, v) in a.iter().zip(b) {
        for (p, q) in u.to_array().iter().zip(v.to_array()) {
            assert!((p - q).abs() < 1e-9, "{u:?} vs {v:?}");
        }
    }
}

#[test]
fn structural_laws_hold() {
    support::augmentation_laws().unwrap();
}

fn cascade(schedule: ThresholdSchedule) -> CascadeSettings {
    CascadeSettings {
        thresholds: cascade_thresholds(schedule),
        augment_first: false,
        box_iou: [false; 3],
        stage_weights: [1.0, 0.5, 0.25],
    }
}

#[test]
fn second_stage_positives_counted_at_its_threshold() {
    let mut r = rng(7);
    let (channels, grid, k) = (2, 3, 2);
    for _ in 0..20 {
        let img = random_image(&mut r, channels, 64);
        let gt = GroundTruth {
            objects: (0..3)
                .map(|j| GtObject {
                    bbox: random_box(&mut r, 40.0, 8.0, 22.0),
                    class_id: j % k,
                })
                .collect(),
        };
        let originals: Vec<_> = gt
            .objects
            .iter()
            .flat_map(|o| {
                let b = o.bbox;
                [
                    b,
                    support::bx(b.x1 + 1.0, b.y1, b.x2 + 2.0, b.y2 + 1.5),
                    support::bx(b.x1 - 2.0, b.y1 - 1.0, b.x2, b.y2),
                ]
            })
            .filter(|b| b.x1 >= 0.0 && b.y1 >= 0.0)
            .collect();
        let models: Vec<HeadModel> = (0..3)
            .map(|_| random_model(&mut r, k, feature_len(channels, grid), 0.01))
            .collect();
        let pooler = RoiPooler::new(&img, grid).unwrap();
        let settings = cascade(ThresholdSchedule::Apdi);
        let stages =
            cascade_stage_inputs(&models, &pooler, &img.bounds(), &originals, &gt, &settings)
                .unwrap();
        let second = &stages[1];
        let matched = match_proposals(second, &gt, settings.thresholds[1])
            .unwrap()
            .num_positive();
        let brute = second
            .iter()
            .filter(|b| gt.objects.iter().any(|o| iou(b, &o.bbox) >= 0.65))
            .count();
        assert_eq!(matched, brute);
    }
}

#[test]
fn zero_heads_leave_cascade_boxes_unchanged() {
    let mut r = rng(8);
    let img = random_image(&mut r, 2, 64);
    let gt = GroundTruth::default();
    let boxes: Vec<_> = (0..10)
        .map(|_| random_box(&mut r, 30.0, 4.0, 30.0))
        .collect();
    let models = vec![HeadModel::zeros(2, feature_len(2, 3), DeltaWeights::default()); 3];
    let pooler = RoiPooler::new(&img, 3).unwrap();
    let stages = cascade_stage_inputs(
        &models,
        &pooler,
        &img.bounds(),
        &boxes,
        &gt,
        &cascade(ThresholdSchedule::Baseline),
    )
    .unwrap();
    for s in &stages {
        assert_close(s, &boxes);
    }
}

#[test]
fn ibbr_composes_single_passes() {
    let mut r = rng(9);
    let img = random_image(&mut r, 2, 64);
    let model = random_model(&mut r, 2, feature_len(2, 4), 0.05);
    let boxes: Vec<_> = (0..12)
        .map(|_| random_box(&mut r, 40.0, 6.0, 20.0))
        .collect();
    let set = ProposalSet {
        boxes: boxes.clone(),
        scores: Some(vec![0.5; 12]),
        provenance: Some(vec![Provenance::Original; 12]),
    };
    let mut manual = boxes;
    for n in 1..=3 {
        manual = refine(&model, &img, &manual, 4).unwrap();
        let out = ibbr_refine(&model, &set, &img, 4, n).unwrap();
        assert_eq!(out.boxes, manual, "{n} passes");
        assert_eq!(out.scores, set.scores);
        assert!(out
            .provenance
            .unwrap()
            .iter()
            .all(|p| *p == Provenance::Refined));
    }
}

#[test]
fn zero_model_augmentation_duplicates_positives() {
    let mut r = rng(10);
    let img = random_image(&mut r, 2, 64);
    let gt = GroundTruth {
        objects: vec![GtObject {
            bbox: support::bx(10.0, 10.0, 40.0, 40.0),
            class_id: 0,
        }],
    };
    let originals = ProposalSet::from_boxes(vec![
        support::bx(10.0, 10.0, 40.0, 40.0),
        support::bx(12.0, 10.0, 42.0, 40.0),
        support::bx(30.0, 30.0, 60.0, 60.0),
    ]);
    let model = HeadModel::zeros(1, feature_len(2, 4), DeltaWeights::default());
    let aug = augment_proposals(&originals, &gt, &model, &img, 4, 0.5).unwrap();
    assert_eq!(aug.num_positive_original(), 2);
    assert_eq!(&aug.boxes[..2], &originals.boxes[..2]);
    assert_close(&aug.boxes[2..], &originals.boxes);
    assert_eq!(aug.source, vec![0, 1, 0, 1, 2]);
}
