use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use satr_core::detection::{GroundTruthBox, PredBox};
use satr_core::froc::{froc, DetectionSet, ImageDetections, FPPI_POINTS};
use satr_core::CoreError;

fn gt(cx: f64, cy: f64) -> GroundTruthBox {
    GroundTruthBox { cx, cy, w: 10.0, h: 10.0 }
}

fn pred(cx: f64, cy: f64, score: f64) -> PredBox {
    PredBox { cx, cy, w: 10.0, h: 10.0, score }
}

#[test]
fn one_image_true_positive_above_false_positive() {
    let set = DetectionSet {
        images: vec![ImageDetections { preds: vec![pred(20.0, 20.0, 0.9), pred(50.0, 50.0, 0.8)], gts: vec![gt(20.0, 20.0)] }],
    };
    let r = froc(&set, 0.5).unwrap();
    assert_eq!(r.sensitivity, [1.0; 4]);
    assert_eq!(r.average, 1.0);
}

#[test]
fn two_images_one_hit_one_false_positive() {
    let set = DetectionSet {
        images: vec![
            ImageDetections { preds: vec![pred(20.0, 20.0, 0.9)], gts: vec![gt(20.0, 20.0)] },
            ImageDetections { preds: vec![pred(50.0, 50.0, 0.6)], gts: vec![gt(10.0, 10.0)] },
        ],
    };
    let r = froc(&set, 0.5).unwrap();
    assert_eq!(r.sensitivity, [0.5; 4]);
}

#[test]
fn no_predictions_gives_zero_and_no_ground_truth_is_an_error() {
    let set = DetectionSet { images: vec![ImageDetections { preds: vec![], gts: vec![gt(5.0, 5.0)] }] };
    assert_eq!(froc(&set, 0.5).unwrap().sensitivity, [0.0; 4]);
    let empty = DetectionSet { images: vec![ImageDetections { preds: vec![pred(1.0, 1.0, 0.3)], gts: vec![] }] };
    assert!(matches!(froc(&empty, 0.5), Err(CoreError::UndefinedSensitivity)));
}

#[test]
fn duplicate_detections_credit_a_lesion_once() {
    let set = DetectionSet {
        images: vec![ImageDetections {
            preds: vec![pred(20.0, 20.0, 0.9), pred(21.0, 20.0, 0.85), pred(20.0, 21.0, 0.8)],
            gts: vec![gt(20.0, 20.0)],
        }],
    };
    // Duplicates are false positives; at 0.5 FPPI only the top box counts.
    let r = froc(&set, 0.5).unwrap();
    assert_eq!(r.sensitivity, [1.0; 4]);
    let two = DetectionSet {
        images: vec![ImageDetections {
            preds: vec![pred(21.0, 20.0, 0.9), pred(20.0, 20.0, 0.8)],
            gts: vec![gt(20.0, 20.0), gt(60.0, 60.0)],
        }],
    };
    assert_eq!(froc(&two, 0.5).unwrap().sensitivity, [0.5; 4]);
}

/// Reference: for every candidate threshold, match from scratch and
/// count; then take the best recall within each FPPI budget.
fn oracle(set: &DetectionSet, iou_thresh: f64) -> [f64; 4] {
    let mut thresholds: Vec<f64> = set.images.iter().flat_map(|im| im.preds.iter().map(|p| p.score)).collect();
    thresholds.push(f64::INFINITY);
    let total: usize = set.images.iter().map(|im| im.gts.len()).sum();
    let n = set.images.len() as f64;
    let mut best = [0.0f64; 4];
    for &t in &thresholds {
        let mut kept: Vec<(f64, usize, usize)> = Vec::new();
        for (i, im) in set.images.iter().enumerate() {
            for (p, pr) in im.preds.iter().enumerate() {
                if pr.score >= t {
                    kept.push((pr.score, i, p));
                }
            }
        }
        kept.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut used: Vec<Vec<bool>> = set.images.iter().map(|im| vec![false; im.gts.len()]).collect();
        let (mut tp, mut fp) = (0usize, 0usize);
        for (_, i, p) in kept {
            let im = &set.images[i];
            let mut choice: Option<(usize, f64)> = None;
            for g in 0..im.gts.len() {
                let v = im.preds[p].iou(&im.gts[g]);
                if !used[i][g] && v >= iou_thresh && choice.map_or(true, |(_, b)| v > b) {
                    choice = Some((g, v));
                }
            }
            match choice {
                Some((g, _)) => {
                    used[i][g] = true;
                    tp += 1;
                }
                None => fp += 1,
            }
            assert!(used[i].iter().filter(|&&u| u).count() <= im.gts.len());
        }
        for (k, &budget) in FPPI_POINTS.iter().enumerate() {
            if fp as f64 / n <= budget {
                best[k] = best[k].max(tp as f64 / total as f64);
            }
        }
    }
    best
}

#[test]
fn agrees_with_per_threshold_enumeration_on_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    while checked < 200 {
        let images = rng.gen_range(1..=5);
        let mut set = DetectionSet::default();
        for _ in 0..images {
            let gts: Vec<GroundTruthBox> = (0..rng.gen_range(0..=4))
                .map(|_| GroundTruthBox {
                    cx: rng.gen_range(5.0..25.0),
                    cy: rng.gen_range(5.0..25.0),
                    w: rng.gen_range(3.0..10.0),
                    h: rng.gen_range(3.0..10.0),
                })
                .collect();
            let mut preds: Vec<PredBox> = Vec::new();
            for _ in 0..rng.gen_range(0..=4) {
                // Mostly near a ground-truth box so matches actually occur;
                // coarse scores so ties happen.
                let (cx, cy, w, h) = match gts.get(rng.gen_range(0..gts.len().max(1))) {
                    Some(g) if rng.gen_bool(0.7) => (g.cx + rng.gen_range(-2.0..2.0), g.cy + rng.gen_range(-2.0..2.0), g.w * rng.gen_range(0.7..1.3), g.h * rng.gen_range(0.7..1.3)),
                    _ => (rng.gen_range(5.0..25.0), rng.gen_range(5.0..25.0), rng.gen_range(3.0..10.0), rng.gen_range(3.0..10.0)),
                };
                preds.push(PredBox { cx, cy, w, h, score: rng.gen_range(0..10) as f64 / 10.0 });
            }
            set.images.push(ImageDetections { preds, gts });
        }
        if set.total_gt() == 0 {
            continue;
        }
        let got = froc(&set, 0.5).unwrap();
        let want = oracle(&set, 0.5);
        assert_eq!(got.sensitivity, want, "case {checked}: {set:?}");
        assert!(got.sensitivity.windows(2).all(|w| w[0] <= w[1]));
        assert!(got.sensitivity.iter().all(|s| (0.0..=1.0).contains(s)));
        checked += 1;
    }
}
