//! Checks shared by the integration tests and the acceptance harness. Each
//! returns `Ok(detail)` or `Err(detail)`.
#![allow(dead_code)]

use std::collections::BTreeMap;

use apdi_core::augment::{
    augment_proposals, route_membership, route_training_samples, AugmentedProposals,
    IouTargetSource, RoutingRules,
};
use apdi_core::data::{GtObject, ImageTensor};
use apdi_core::eval::{average_precision, average_recall, ARTable, ApParams};
use apdi_core::features::feature_len;
use apdi_core::geometry::{decode_deltas, encode_deltas};
use apdi_core::heads::{fit_reg_ridge, LossAccumulator, LossWeights};
use apdi_core::matching::{cascade_thresholds, match_proposals, sample, ThresholdSchedule};
use apdi_core::pipeline::{calibrate, nms_indices, Detection};
use apdi_core::{
    iou, BBox, BoxDeltas, DeltaWeights, GroundTruth, HeadModel, ProposalSet, Provenance,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

pub fn random_box(r: &mut impl Rng, extent: f64, min_size: f64, max_size: f64) -> BBox {
    let w = r.random_range(min_size..max_size);
    let h = r.random_range(min_size..max_size);
    let x = r.random_range(0.0..extent);
    let y = r.random_range(0.0..extent);
    bx(x, y, x + w, y + h)
}

pub fn integer_box(r: &mut impl Rng, extent: u32) -> BBox {
    let x1 = r.random_range(0..extent);
    let y1 = r.random_range(0..extent);
    let x2 = r.random_range(x1 + 1..=extent);
    let y2 = r.random_range(y1 + 1..=extent);
    bx(x1 as f64, y1 as f64, x2 as f64, y2 as f64)
}

/// Counts unit pixels covered by integer boxes.
pub fn raster_iou(a: &BBox, b: &BBox) -> f64 {
    let hi = a.x2.max(b.x2).max(a.y2).max(b.y2) as i64;
    let inside = |bb: &BBox, x: i64, y: i64| {
        x as f64 >= bb.x1 && (x + 1) as f64 <= bb.x2 && y as f64 >= bb.y1 && (y + 1) as f64 <= bb.y2
    };
    let (mut inter, mut union) = (0u64, 0u64);
    for y in 0..hi {
        for x in 0..hi {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn fail(msg: String) -> Check {
    Err(msg)
}

// ---------------------------------------------------------------------------
// Geometry

pub fn geometry_suite() -> Check {
    let mut r = rng(11);
    let mut worst_sym = 0usize;
    for _ in 0..100_000 {
        let a = random_box(&mut r, 100.0, 0.5, 60.0);
        let b = random_box(&mut r, 100.0, 0.5, 60.0);
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        if ab != ba {
            worst_sym += 1;
        }
        if !(0.0..=1.0).contains(&ab) {
            return fail(format!("iou {ab} out of [0, 1] for {a:?} {b:?}"));
        }
        if (iou(&a, &a) - 1.0).abs() > 1e-12 {
            return fail(format!("self iou of {a:?} is {}", iou(&a, &a)));
        }
    }
    if worst_sym > 0 {
        return fail(format!("{worst_sym} asymmetric pairs"));
    }
    for _ in 0..1_000 {
        let a = integer_box(&mut r, 16);
        let b = integer_box(&mut r, 16);
        let (got, want) = (iou(&a, &b), raster_iou(&a, &b));
        if (got - want).abs() > 1e-12 {
            return fail(format!("iou {got} vs raster {want} for {a:?} {b:?}"));
        }
    }
    let mut worst = 0.0f64;
    for k in 0..10_000 {
        let w = if k % 2 == 0 {
            DeltaWeights::default()
        } else {
            DeltaWeights::UNIT
        };
        let a = random_box(&mut r, 200.0, 2.0, 100.0);
        let b = random_box(&mut r, 200.0, 2.0, 100.0);
        let d = encode_deltas(&a, &b, &w).map_err(|e| e.to_string())?;
        let back = decode_deltas(&a, &d, &w, None).map_err(|e| e.to_string())?;
        for (u, v) in back.to_array().iter().zip(b.to_array()) {
            worst = worst.max((u - v).abs());
        }
    }
    if worst >= 1e-6 {
        return fail(format!("roundtrip error {worst:e}"));
    }
    Ok(format!(
        "1e5 iou pairs, 1e3 raster cases, roundtrip max error {worst:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// Matching and sampling

fn brute_match(
    proposals: &[BBox],
    gt: &GroundTruth,
    thr: f64,
) -> Vec<(Option<usize>, f64, bool, Option<usize>)> {
    proposals
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (j, o) in gt.objects.iter().enumerate() {
                let v = raster_iou(p, &o.bbox);
                if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, v)) if v >= thr => (Some(j), v, true, Some(gt.objects[j].class_id)),
                Some((j, v)) => (Some(j), v, false, None),
                None => (None, 0.0, false, None),
            }
        })
        .collect()
}

/// Largest total, then positives closest to the quota.
fn brute_quota(np: usize, nn: usize, batch: usize, frac: f64) -> (usize, usize) {
    let quota = ((batch as f64) * frac).ceil() as usize;
    let target = quota.min(np);
    let mut best = (0, 0);
    let mut best_key = (0usize, usize::MAX);
    for p in 0..=np {
        for n in 0..=nn {
            if p + n > batch {
                continue;
            }
            let key = (p + n, p.abs_diff(target));
            if key.0 > best_key.0 || (key.0 == best_key.0 && key.1 < best_key.1) {
                best_key = key;
                best = (p, n);
            }
        }
    }
    best
}

pub fn matcher_sampler_suite() -> Check {
    let mut r = rng(22);
    let weights = DeltaWeights::default();
    let mut cases = 0;
    for n in 0..=20usize {
        for g in 0..=5usize {
            for rep in 0..4 {
                let gt = GroundTruth {
                    objects: (0..g)
                        .map(|j| GtObject {
                            bbox: integer_box(&mut r, 24),
                            class_id: j % 3,
                        })
                        .collect(),
                };
                let mut proposals: Vec<BBox> = (0..n).map(|_| integer_box(&mut r, 24)).collect();
                if rep == 0 && g > 0 && n > 0 {
                    proposals[0] = gt.objects[0].bbox;
                }
                for thr in [0.3, 0.5, 0.7] {
                    let m = match_proposals(&proposals, &gt, thr).map_err(|e| e.to_string())?;
                    let want = brute_match(&proposals, &gt, thr);
                    for (i, (pm, w)) in m.matches.iter().zip(&want).enumerate() {
                        let got = (pm.matched_gt, pm.max_iou, pm.positive, pm.class_target);
                        if got.0 != w.0
                            || (got.1 - w.1).abs() > 1e-12
                            || got.2 != w.2
                            || got.3 != w.3
                        {
                            return fail(format!(
                                "n={n} g={g} thr={thr} proposal {i}: {got:?} vs {w:?}"
                            ));
                        }
                    }
                    for (batch_size, frac) in [(1, 0.25), (4, 0.5), (8, 0.25), (32, 1.0)] {
                        let s = sample(&m, &proposals, &gt, &weights, batch_size, frac, &mut r)
                            .map_err(|e| e.to_string())?;
                        let np = m.num_positive();
                        let (wp, wn) = brute_quota(np, n - np, batch_size, frac);
                        if s.num_positive() != wp || s.len() - s.num_positive() != wn {
                            return fail(format!(
                                "n={n} g={g} batch={batch_size}: took {}+{}, expected {wp}+{wn}",
                                s.num_positive(),
                                s.len() - s.num_positive()
                            ));
                        }
                        let (pos, neg) = s.indices.split_at(wp);
                        if !pos.windows(2).all(|w| w[0] < w[1])
                            || !neg.windows(2).all(|w| w[0] < w[1])
                        {
                            return fail("sampled indices not ascending within each class".into());
                        }
                        for (k, &i) in s.indices.iter().enumerate() {
                            let pm = m.matches[i];
                            if pm.positive != (k < wp) || s.class_targets[k] != pm.class_target {
                                return fail(format!("sample {k} labeled inconsistently"));
                            }
                            let want_delta = if pm.positive {
                                let j = pm.matched_gt.unwrap();
                                Some(
                                    encode_deltas(&proposals[i], &gt.objects[j].bbox, &weights)
                                        .unwrap(),
                                )
                            } else {
                                None
                            };
                            if s.delta_targets[k] != want_delta {
                                return fail(format!("sample {k} delta target mismatch"));
                            }
                            if (s.iou_targets[k] - pm.max_iou).abs() > 0.0 {
                                return fail(format!("sample {k} iou target mismatch"));
                            }
                        }
                    }
                }
                cases += 1;
            }
        }
    }
    let base = cascade_thresholds(ThresholdSchedule::Baseline);
    let apdi = cascade_thresholds(ThresholdSchedule::Apdi);
    if base != [0.5, 0.6, 0.7] || apdi != [0.5, 0.65, 0.8] {
        return fail(format!("cascade thresholds {base:?} / {apdi:?}"));
    }
    Ok(format!(
        "{cases} configurations up to 20x5, cascade thresholds {base:?} and {apdi:?}"
    ))
}

// ---------------------------------------------------------------------------
// Augmentation

pub fn random_model(r: &mut impl Rng, num_classes: usize, dim: usize, scale: f64) -> HeadModel {
    let mut m = HeadModel::zeros(num_classes, dim, DeltaWeights::default());
    for w in m
        .w_cls
        .iter_mut()
        .chain(m.w_reg.iter_mut())
        .chain(m.w_iou.iter_mut())
    {
        *w = r.random_range(-scale..scale);
    }
    m
}

pub fn random_image(r: &mut impl Rng, channels: usize, size: usize) -> ImageTensor {
    let data = (0..channels * size * size)
        .map(|_| r.random_range(-1.0..1.0))
        .collect();
    ImageTensor::from_vec(channels, size, size, data).unwrap()
}

fn crafted_augmentation() -> (AugmentedProposals, GroundTruth) {
    let gt = GroundTruth {
        objects: vec![GtObject {
            bbox: bx(0.0, 0.0, 100.0, 100.0),
            class_id: 1,
        }],
    };
    // Heights chosen so the IoU with the ground truth equals h / 100.
    let heights = [0.0, 20.0, 29.0, 30.0, 31.0, 49.0, 50.0, 51.0, 80.0, 100.0];
    let mut boxes = Vec::new();
    let mut provenance = Vec::new();
    for p in [
        Provenance::PositiveOriginal,
        Provenance::Refined,
        Provenance::Original,
    ] {
        for &h in &heights {
            let b = if h == 0.0 {
                bx(200.0, 200.0, 220.0, 220.0)
            } else {
                bx(0.0, 0.0, 100.0, h)
            };
            boxes.push(b);
            provenance.push(p);
        }
    }
    let max_iou: Vec<f64> = boxes.iter().map(|b| iou(b, &gt.objects[0].bbox)).collect();
    let matched_gt = max_iou
        .iter()
        .map(|&v| if v > 0.0 { Some(0) } else { None })
        .collect();
    let n = boxes.len();
    (
        AugmentedProposals {
            boxes,
            provenance,
            source: (0..n).collect(),
            max_iou,
            matched_gt,
        },
        gt,
    )
}

pub fn augmentation_laws() -> Check {
    let mut r = rng(33);
    let k = 3;
    let (channels, grid) = (2, 3);
    for case in 0..50 {
        let img = random_image(&mut r, channels, 48);
        let gt = GroundTruth {
            objects: (0..r.random_range(0..4))
                .map(|j| GtObject {
                    bbox: random_box(&mut r, 30.0, 4.0, 18.0),
                    class_id: j % k,
                })
                .collect(),
        };
        let originals = ProposalSet::from_boxes(
            (0..r.random_range(0..30))
                .map(|_| random_box(&mut r, 40.0, 2.0, 20.0))
                .collect(),
        );
        let model = random_model(&mut r, k, feature_len(channels, grid), 0.05);
        let before = model.clone();
        let aug = augment_proposals(&originals, &gt, &model, &img, grid, 0.5)
            .map_err(|e| e.to_string())?;
        let positives = match_proposals(&originals.boxes, &gt, 0.5)
            .unwrap()
            .num_positive();
        if aug.len() != positives + originals.len() || aug.num_positive_original() != positives {
            return fail(format!(
                "case {case}: |augmented| {} vs {positives} + {}",
                aug.len(),
                originals.len()
            ));
        }
        let same_bits =
            |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        if !(same_bits(&model.w_cls, &before.w_cls)
            && same_bits(&model.w_reg, &before.w_reg)
            && same_bits(&model.w_iou, &before.w_iou))
        {
            return fail(format!("case {case}: augmentation changed the model"));
        }
    }

    let (aug, gt) = crafted_augmentation();
    let mut checked = 0;
    for source in [IouTargetSource::Augmented, IouTargetSource::RefinedOnly] {
        let rules = RoutingRules {
            iou_source: source,
            ..RoutingRules::default()
        };
        let routed = route_training_samples(&aug, &gt, &rules, &DeltaWeights::default())
            .map_err(|e| e.to_string())?;
        for i in 0..aug.len() {
            let (p, v) = (aug.provenance[i], aug.max_iou[i]);
            let want_cls = p == Provenance::Refined;
            let want_reg = v >= 0.5;
            let want_iou =
                v >= 0.3 && (source == IouTargetSource::Augmented || p == Provenance::Refined);
            let m = route_membership(p, v, &rules);
            let in_reg = routed.reg.iter().any(|(j, _)| *j == i);
            let in_iou = routed.iou.iter().find(|(j, _)| *j == i);
            if m.cls != want_cls || m.reg != want_reg || m.iou != want_iou {
                return fail(format!("membership of {p:?} at IoU {v}: {m:?}"));
            }
            if routed.cls.contains(&i) != want_cls
                || in_reg != want_reg
                || in_iou.is_some() != want_iou
            {
                return fail(format!("routed sets disagree for {p:?} at IoU {v}"));
            }
            if let Some((_, t)) = in_iou {
                if *t != v {
                    return fail(format!("iou target {t} for box with IoU {v}"));
                }
            }
            checked += 1;
        }
    }
    Ok(format!(
        "50 random cardinality cases, weights unchanged, {checked} routing cases"
    ))
}

// ---------------------------------------------------------------------------
// Head numerics

fn total_loss(m: &HeadModel, f: &[f64], class: usize, delta: &BoxDeltas, target_iou: f64) -> f64 {
    let mut acc = LossAccumulator::new(m);
    acc.add_cls(m, f, class).unwrap();
    acc.add_reg(m, f, delta).unwrap();
    acc.add_iou(m, f, target_iou).unwrap();
    acc.finish(&LossWeights::default()).0.total
}

pub fn head_numerics() -> Check {
    let mut r = rng(44);
    let (k, d) = (3, 7);
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for instance in 0..100 {
        let m = random_model(&mut r, k, d, 0.5);
        let mut f: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        f[d - 1] = 1.0;
        let class = r.random_range(0..=k);
        // Keep every regression residual away from the L1 kink.
        let pred = m.deltas(&f).to_array();
        let delta = BoxDeltas::from_array(pred.map(|p| {
            let off: f64 = r.random_range(0.05..1.0);
            if r.random_bool(0.5) {
                p + off
            } else {
                p - off
            }
        }));
        let target_iou = r.random_range(0.0..1.0);

        let mut acc = LossAccumulator::new(&m);
        acc.add_cls(&m, &f, class).unwrap();
        acc.add_reg(&m, &f, &delta).unwrap();
        acc.add_iou(&m, &f, target_iou).unwrap();
        let (_, g) = acc.finish(&LossWeights::default());

        let analytic: Vec<f64> = g.cls.iter().chain(&g.reg).chain(&g.iou).copied().collect();
        let mut flat: Vec<f64> = m
            .w_cls
            .iter()
            .chain(&m.w_reg)
            .chain(&m.w_iou)
            .copied()
            .collect();
        let (nc, nr) = (m.w_cls.len(), m.w_reg.len());
        let rebuild = |w: &[f64]| {
            let mut out = m.clone();
            out.w_cls.copy_from_slice(&w[..nc]);
            out.w_reg.copy_from_slice(&w[nc..nc + nr]);
            out.w_iou.copy_from_slice(&w[nc + nr..]);
            out
        };
        for p in 0..flat.len() {
            let orig = flat[p];
            flat[p] = orig + eps;
            let up = total_loss(&rebuild(&flat), &f, class, &delta, target_iou);
            flat[p] = orig - eps;
            let down = total_loss(&rebuild(&flat), &f, class, &delta, target_iou);
            flat[p] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let rel =
                (numeric - analytic[p]).abs() / numeric.abs().max(analytic[p].abs()).max(1e-3);
            if rel > 1e-4 {
                return fail(format!(
                    "instance {instance} weight {p}: analytic {} numeric {numeric}",
                    analytic[p]
                ));
            }
            worst = worst.max(rel);
        }
    }

    let (n, dim, lambda) = (60, 6, 0.3);
    let feats: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let targets: Vec<BoxDeltas> = (0..n)
        .map(|_| BoxDeltas::from_array([0; 4].map(|_| r.random_range(-2.0..2.0))))
        .collect();
    let refs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
    let w = fit_reg_ridge(&refs, &targets, lambda).map_err(|e| e.to_string())?;
    let mut grad_norm = 0.0f64;
    for c in 0..4 {
        for j in 0..dim {
            let mut g = 2.0 * lambda * w[c * dim + j];
            for (f, t) in feats.iter().zip(&targets) {
                let pred: f64 = (0..dim).map(|q| w[c * dim + q] * f[q]).sum();
                g += 2.0 * (pred - t.to_array()[c]) * f[j];
            }
            grad_norm = grad_norm.max(g.abs());
        }
    }
    if grad_norm > 1e-8 {
        return fail(format!(
            "ridge objective gradient {grad_norm:e} at the fitted weights"
        ));
    }
    Ok(format!(
        "100 instances, worst relative error {worst:.1e}; ridge gradient {grad_norm:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// NMS and calibration

pub fn det(b: BBox, score: f64) -> Detection {
    Detection {
        bbox: b,
        class_id: 0,
        raw_cls_score: score,
        iou_score: 1.0,
        final_score: score,
        image_id: 0,
    }
}

/// Keeps `i` iff no higher-ranked kept box overlaps it at `thr` or more,
/// ranking by score then index.
fn brute_nms(dets: &[Detection], thr: f64) -> Vec<usize> {
    let n = dets.len();
    let ranks_before = |a: usize, b: usize| {
        dets[a].final_score > dets[b].final_score
            || (dets[a].final_score == dets[b].final_score && a < b)
    };
    let mut kept = vec![false; n];
    let mut decided = vec![false; n];
    while decided.iter().any(|d| !d) {
        // The best undecided box has all its predecessors decided.
        let i = (0..n)
            .filter(|&i| !decided[i])
            .find(|&i| (0..n).all(|j| j == i || decided[j] || !ranks_before(j, i)))
            .expect("a minimal element exists");
        kept[i] = (0..n)
            .all(|j| !(kept[j] && ranks_before(j, i) && iou(&dets[j].bbox, &dets[i].bbox) >= thr));
        decided[i] = true;
    }
    let mut out: Vec<usize> = (0..n).filter(|&i| kept[i]).collect();
    out.sort_by(|&a, &b| {
        if ranks_before(a, b) {
            std::cmp::Ordering::Less
        } else {
            std::cmp::Ordering::Greater
        }
    });
    out
}

pub fn crafted_cluster() -> Vec<Detection> {
    let boxes = [
        (10.0, 10.0, 50.0, 50.0, 0.9),
        (12.0, 10.0, 52.0, 50.0, 0.9),
        (10.0, 14.0, 50.0, 54.0, 0.8),
        (30.0, 30.0, 70.0, 70.0, 0.8),
        (0.0, 0.0, 40.0, 40.0, 0.7),
        (11.0, 11.0, 49.0, 49.0, 0.95),
        (60.0, 60.0, 90.0, 90.0, 0.6),
        (62.0, 61.0, 91.0, 92.0, 0.6),
        (20.0, 10.0, 60.0, 50.0, 0.5),
        (10.0, 10.0, 30.0, 50.0, 0.85),
        (10.0, 10.0, 50.0, 50.0, 0.9),
        (35.0, 35.0, 75.0, 75.0, 0.4),
    ];
    boxes
        .iter()
        .map(|&(a, b, c, d, s)| det(bx(a, b, c, d), s))
        .collect()
}

pub fn nms_and_calibration() -> Check {
    let cluster = crafted_cluster();
    let mut subsets = 0;
    for mask in 1u32..(1 << cluster.len()) {
        let dets: Vec<Detection> = (0..cluster.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| cluster[i].clone())
            .collect();
        for thr in [0.3, 0.5, 0.7] {
            let got = nms_indices(&dets, thr);
            let want = brute_nms(&dets, thr);
            if got != want {
                return fail(format!("subset {mask:#b} thr {thr}: {got:?} vs {want:?}"));
            }
        }
        subsets += 1;
    }
    let mut r = rng(55);
    for _ in 0..10_000 {
        let raw: Vec<f64> = (0..5).map(|_| r.random_range(0.0..1.0)).collect();
        let s: f64 = r.random_range(1e-6..1.0);
        let cal = calibrate(&raw, s);
        if raw
            .iter()
            .zip(&cal)
            .any(|(a, c)| (a * s).to_bits() != c.to_bits())
        {
            return fail("calibration is not an exact product".into());
        }
        let argmax = |v: &[f64]| {
            (0..v.len())
                .max_by(|&a, &b| v[a].total_cmp(&v[b]).then(b.cmp(&a)))
                .unwrap()
        };
        if argmax(&raw) != argmax(&cal) {
            return fail(format!("calibration moved the argmax of {raw:?}"));
        }
    }
    Ok(format!(
        "{subsets} cluster subsets x 3 thresholds, 1e4 calibration cases"
    ))
}

// ---------------------------------------------------------------------------
// Metric fixtures

/// Reference values from pycocotools' COCOeval on `ap_fixture()`.
pub const AP_FIXTURE_REFERENCE: [f64; 6] = [
    0.7092409240924091,
    0.9174917491749174,
    0.9174917491749174,
    0.7,
    0.8999999999999999,
    0.7999999999999999,
];

pub fn ap_fixture() -> (Vec<Detection>, BTreeMap<u64, GroundTruth>) {
    let g = |b: BBox, c: usize| GtObject {
        bbox: b,
        class_id: c,
    };
    let mut gts = BTreeMap::new();
    gts.insert(
        1,
        GroundTruth {
            objects: vec![
                g(bx(10.0, 10.0, 50.0, 50.0), 0),
                g(bx(60.0, 60.0, 70.0, 70.0), 1),
            ],
        },
    );
    gts.insert(
        2,
        GroundTruth {
            objects: vec![
                g(bx(0.0, 0.0, 100.0, 100.0), 0),
                g(bx(20.0, 30.0, 44.0, 40.0), 1),
            ],
        },
    );
    let d = |img: u64, c: usize, b: BBox, s: f64| Detection {
        bbox: b,
        class_id: c,
        raw_cls_score: s,
        iou_score: 1.0,
        final_score: s,
        image_id: img,
    };
    let dets = vec![
        d(1, 0, bx(12.0, 12.0, 50.0, 50.0), 0.9),
        d(1, 0, bx(30.0, 30.0, 70.0, 70.0), 0.8),
        d(1, 1, bx(61.0, 60.0, 70.0, 71.0), 0.7),
        d(2, 0, bx(5.0, 5.0, 100.0, 95.0), 0.6),
        d(2, 1, bx(18.0, 30.0, 44.0, 41.0), 0.5),
    ];
    (dets, gts)
}

pub fn recall_fixture() -> (BTreeMap<u64, ProposalSet>, BTreeMap<u64, GroundTruth>) {
    let mut gts = BTreeMap::new();
    gts.insert(
        0,
        GroundTruth {
            objects: vec![
                GtObject {
                    bbox: bx(0.0, 0.0, 100.0, 100.0),
                    class_id: 0,
                },
                GtObject {
                    bbox: bx(200.0, 0.0, 300.0, 100.0),
                    class_id: 0,
                },
            ],
        },
    );
    let mut props = BTreeMap::new();
    props.insert(
        0,
        ProposalSet::from_boxes(vec![bx(0.0, 0.0, 100.0, 75.0), bx(200.0, 0.0, 300.0, 55.0)]),
    );
    (props, gts)
}

pub fn monotone_or_err(table: &ARTable, what: &str) -> Check {
    if table.is_monotone() {
        Ok(String::new())
    } else {
        Err(format!(
            "{what}: recall not monotone in the threshold: {:?}",
            table.recall
        ))
    }
}

pub fn metric_fixtures() -> Check {
    let (props, gts) = recall_fixture();
    let table = average_recall(&props, &gts, 1000).map_err(|e| e.to_string())?;
    if (table.ar - 0.4).abs() > 1e-9 {
        return fail(format!("hand-enumerated AR {} != 0.4", table.ar));
    }
    monotone_or_err(&table, "recall fixture")?;
    let (dets, gts) = ap_fixture();
    let s = average_precision(&dets, &gts, 2, &ApParams::default());
    let got = [
        s.ap,
        s.ap50.unwrap_or(f64::NAN),
        s.ap75.unwrap_or(f64::NAN),
        s.ap_small.unwrap_or(f64::NAN),
        s.ap_medium.unwrap_or(f64::NAN),
        s.ap_large.unwrap_or(f64::NAN),
    ];
    for (name, (g, w)) in ["AP", "AP50", "AP75", "APs", "APm", "APl"]
        .iter()
        .zip(got.iter().zip(AP_FIXTURE_REFERENCE))
    {
        let err = (g - w).abs();
        if err.is_nan() || err > 1e-6 {
            return fail(format!("{name} {g} vs reference {w}"));
        }
    }
    Ok(format!(
        "AR {:.3}, AP {:.6} matches the reference",
        table.ar, s.ap
    ))
}
