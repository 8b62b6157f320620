use proptest::prelude::*;
use satr_autodiff::Tensor;
use satr_core::detection::{decode, GroundTruthBox, PredBox};
use satr_core::froc::{froc, DetectionSet, ImageDetections};

fn heatmaps() -> impl Strategy<Value = (Tensor, Tensor)> {
    (2usize..10, 2usize..10).prop_flat_map(|(h, w)| {
        (prop::collection::vec(0.0f64..1.0, h * w), prop::collection::vec(0.1f64..6.0, 2 * h * w))
            .prop_map(move |(a, b)| (Tensor::new(&[1, h, w], a).unwrap(), Tensor::new(&[2, h, w], b).unwrap()))
    })
}

fn boxes() -> impl Strategy<Value = Vec<GroundTruthBox>> {
    prop::collection::vec((2.0f64..28.0, 2.0f64..28.0, 2.0f64..8.0, 2.0f64..8.0), 0..4)
        .prop_map(|v| v.into_iter().map(|(cx, cy, w, h)| GroundTruthBox { cx, cy, w, h }).collect())
}

fn preds() -> impl Strategy<Value = Vec<PredBox>> {
    prop::collection::vec((2.0f64..28.0, 2.0f64..28.0, 2.0f64..8.0, 2.0f64..8.0, 0u8..5), 0..5)
        .prop_map(|v| v.into_iter().map(|(cx, cy, w, h, s)| PredBox { cx, cy, w, h, score: s as f64 / 4.0 }).collect())
}

proptest! {
    #[test]
    fn decode_respects_k_max_floor_and_bounds((hm, sizes) in heatmaps(), k in 1usize..8, floor in 0.0f64..0.9) {
        let (h, w) = (hm.shape()[1] * 2, hm.shape()[2] * 2);
        let out = decode(&hm, &sizes, 2, k, floor, (h, w));
        prop_assert!(out.len() <= k);
        for b in &out {
            prop_assert!(b.score >= floor);
            let [x0, y0, x1, y1] = b.corners();
            prop_assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= w as f64 && y1 <= h as f64);
        }
        prop_assert!(out.windows(2).all(|p| p[0].score >= p[1].score));
    }

    #[test]
    fn froc_is_monotone_and_bounded(images in prop::collection::vec((preds(), boxes()), 1..5)) {
        let set = DetectionSet { images: images.into_iter().map(|(preds, gts)| ImageDetections { preds, gts }).collect() };
        match froc(&set, 0.5) {
            Ok(r) => {
                prop_assert!(r.sensitivity.windows(2).all(|p| p[0] <= p[1]));
                prop_assert!(r.sensitivity.iter().all(|s| (0.0..=1.0).contains(s)));
                let mean = r.sensitivity.iter().sum::<f64>() / 4.0;
                prop_assert!((r.average - mean).abs() < 1e-15);
            }
            Err(_) => prop_assert_eq!(set.total_gt(), 0),
        }
    }
}
