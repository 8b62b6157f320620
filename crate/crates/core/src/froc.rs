//! Free-response ROC: sensitivity at fixed false-positive-per-image budgets.

use serde::{Deserialize, Serialize};

use crate::detection::{GroundTruthBox, PredBox};
use crate::error::{CoreError, Result};

/// FPPI budgets at which sensitivity is reported.
pub const FPPI_POINTS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub preds: Vec<PredBox>,
    pub gts: Vec<GroundTruthBox>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub images: Vec<ImageDetections>,
}

impl DetectionSet {
    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    pub fn total_gt(&self) -> usize {
        self.images.iter().map(|im| im.gts.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrocResult {
    /// Sensitivity at each of [`FPPI_POINTS`].
    pub sensitivity: [f64; 4],
    pub average: f64,
}

impl FrocResult {
    pub fn from_sensitivity(sensitivity: [f64; 4]) -> Self {
        FrocResult { sensitivity, average: sensitivity.iter().sum::<f64>() / 4.0 }
    }

    /// `{"fppi_0.5": .., "fppi_1": .., "fppi_2": .., "fppi_4": .., "avg": ..}`
    pub fn to_json(&self) -> serde_json::Map<String, serde_json::Value> {
        let mut m = serde_json::Map::new();
        for (t, s) in FPPI_POINTS.iter().zip(self.sensitivity) {
            m.insert(format!("fppi_{t}"), s.into());
        }
        m.insert("avg".into(), self.average.into());
        m
    }
}

/// One point of the curve: cumulative true and false positives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OperatingPoint {
    pub tp: usize,
    pub fp: usize,
}

/// Predictions of the whole set in matching order: score descending, then
/// image, then position within the image.
pub fn ranked(set: &DetectionSet) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> = set
        .images
        .iter()
        .enumerate()
        .flat_map(|(i, im)| (0..im.preds.len()).map(move |p| (i, p)))
        .collect();
    order.sort_by(|&(ia, pa), &(ib, pb)| {
        let (sa, sb) = (set.images[ia].preds[pa].score, set.images[ib].preds[pb].score);
        sb.total_cmp(&sa).then(ia.cmp(&ib)).then(pa.cmp(&pb))
    });
    order
}

/// Best unmatched ground truth for `pred` with IoU ≥ `iou_thresh`; ties go
/// to the lower index.
pub fn best_match(pred: &PredBox, gts: &[GroundTruthBox], taken: &[bool], iou_thresh: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (g, gt) in gts.iter().enumerate() {
        if taken[g] {
            continue;
        }
        let v = pred.iou(gt);
        if v >= iou_thresh && best.map_or(true, |(_, b)| v > b) {
            best = Some((g, v));
        }
    }
    best.map(|(g, _)| g)
}

/// Operating points for every distinct score threshold, highest first,
/// preceded by the empty point. Because matching is greedy in score order,
/// the matching at a lower threshold extends the one at a higher threshold,
/// so a single pass suffices.
pub fn operating_points(set: &DetectionSet, iou_thresh: f64) -> Vec<OperatingPoint> {
    let order = ranked(set);
    let mut taken: Vec<Vec<bool>> = set.images.iter().map(|im| vec![false; im.gts.len()]).collect();
    let mut points = vec![OperatingPoint { tp: 0, fp: 0 }];
    let mut cur = OperatingPoint { tp: 0, fp: 0 };
    for (n, &(i, p)) in order.iter().enumerate() {
        let im = &set.images[i];
        match best_match(&im.preds[p], &im.gts, &taken[i], iou_thresh) {
            Some(g) => {
                taken[i][g] = true;
                cur.tp += 1;
            }
            None => cur.fp += 1,
        }
        let score = im.preds[p].score;
        let group_ends = order.get(n + 1).map_or(true, |&(j, q)| set.images[j].preds[q].score != score);
        if group_ends {
            points.push(cur);
        }
    }
    points
}

/// Sensitivity at FPPI `t` is the best recall among operating points whose
/// false positives per image do not exceed `t`.
pub fn froc(set: &DetectionSet, iou_thresh: f64) -> Result<FrocResult> {
    if set.images.is_empty() {
        return Err(CoreError::config("FROC needs at least one image"));
    }
    if let Some(bad) = set.images.iter().flat_map(|im| &im.preds).find(|p| !p.score.is_finite()) {
        return Err(CoreError::config(format!("prediction score {} is not finite", bad.score)));
    }
    let total = set.total_gt();
    if total == 0 {
        return Err(CoreError::UndefinedSensitivity);
    }
    let n = set.image_count() as f64;
    let points = operating_points(set, iou_thresh);
    Ok(FrocResult::from_sensitivity(FPPI_POINTS.map(|t| {
        points
            .iter()
            .filter(|op| op.fp as f64 / n <= t)
            .map(|op| op.tp as f64 / total as f64)
            .fold(0.0, f64::max)
    })))
}
