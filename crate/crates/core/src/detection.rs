//! Anchor-free detection head on the finest pyramid level: box types,
//! soft heatmap targets, the training loss and peak decoding.

use satr_autodiff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::layers::ConvParams;
use crate::params::{Binder, Init, ParamStore};

/// Axis-aligned box in key-slice pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

impl GroundTruthBox {
    pub fn corners(&self) -> [f64; 4] {
        corners(self.cx, self.cy, self.w, self.h)
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        let [x0, y0, x1, y1] = self.corners();
        self.w > 0.0 && self.h > 0.0 && x0 >= 0.0 && y0 >= 0.0 && x1 <= width && y1 <= height
    }
}

impl PredBox {
    pub fn corners(&self) -> [f64; 4] {
        corners(self.cx, self.cy, self.w, self.h)
    }

    pub fn iou(&self, gt: &GroundTruthBox) -> f64 {
        iou(self.corners(), gt.corners())
    }
}

fn corners(cx: f64, cy: f64, w: f64, h: f64) -> [f64; 4] {
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

/// Intersection over union of two `[x0, y0, x1, y1]` boxes.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    pub k_max: usize,
    pub score_floor: f64,
    pub iou_thresh: f64,
    /// Initial heatmap logit, i.e. the prior foreground probability.
    pub heat_bias_init: f64,
    /// Weight of the size term relative to the heatmap term.
    pub size_weight: f64,
    /// Divisor of the summed heatmap BCE. A per-cell mean drowns the few
    /// positives; a per-positive mean is too spiky early on.
    pub heat_norm: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig { k_max: 16, score_floor: 0.05, iou_thresh: 0.5, heat_bias_init: -2.19, size_weight: 0.1, heat_norm: 30.0 }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(CoreError::config("detect.k_max must be positive"));
        }
        if !(0.0..=1.0).contains(&self.score_floor) {
            return Err(CoreError::config("detect.score_floor must lie in [0, 1]"));
        }
        if !(self.iou_thresh > 0.0 && self.iou_thresh <= 1.0) {
            return Err(CoreError::config("detect.iou_thresh must lie in (0, 1]"));
        }
        if !self.heat_bias_init.is_finite() || !(self.size_weight >= 0.0) {
            return Err(CoreError::config("detect.heat_bias_init must be finite and size_weight nonnegative"));
        }
        if !(self.heat_norm > 0.0 && self.heat_norm.is_finite()) {
            return Err(CoreError::config("detect.heat_norm must be positive"));
        }
        Ok(())
    }
}

/// Head outputs: logits and sigmoid heatmap `[1, Hf, Wf]`, sizes `[2, Hf, Wf]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub logits: Var,
    pub heatmap: Var,
    pub sizes: Var,
}

#[derive(Clone, Debug)]
pub struct Head {
    conv: ConvParams,
    heat: ConvParams,
    size: ConvParams,
}

impl Head {
    pub fn new(width: usize, cfg: &DetectConfig, store: &mut ParamStore, seed: u64) -> Self {
        let conv = ConvParams::new(store, "head.conv", &[width, width, 3, 3], 2.0, seed);
        let heat = ConvParams {
            weight: store.init("head.heat.weight", &[1, width, 1, 1], Init::Normal { std: 0.01 }, seed),
            bias: store.init("head.heat.bias", &[1], Init::Constant(cfg.heat_bias_init), seed),
        };
        let size = ConvParams {
            weight: store.init("head.size.weight", &[2, width, 1, 1], Init::Normal { std: 0.01 }, seed),
            bias: store.init("head.size.bias", &[2], Init::Constant(4.0), seed),
        };
        Head { conv, heat, size }
    }

    pub fn params(&self) -> [ConvParams; 3] {
        [self.conv, self.heat, self.size]
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, fpn_finest: Var) -> Result<HeadOutput> {
        let x = self.conv.conv2d(tape, binder, fpn_finest, 1, 1)?;
        let x = tape.relu(x);
        let logits = self.heat.conv2d(tape, binder, x, 1, 0)?;
        let heatmap = tape.sigmoid(logits);
        let sizes = self.size.conv2d(tape, binder, x, 1, 0)?;
        Ok(HeadOutput { logits, heatmap, sizes })
    }
}

/// Rendered training targets on the head grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// Soft heatmap `[1, Hf, Wf]`.
    pub heat: Tensor,
    /// Box sizes in feature units `[2, Hf, Wf]`, zero off the positives.
    pub sizes: Tensor,
    /// 1 on both size channels of every positive cell.
    pub mask: Tensor,
    pub num_pos: usize,
}

pub const POSITIVE_THRESHOLD: f64 = 0.8;
const HEAT_CLIP: f64 = 1e-3;

/// Gaussian bumps with `σ = size / 6` per axis, maximum over boxes, values
/// below 1e-3 zeroed, the cell containing each centre pinned to 1.
pub fn render_targets(boxes: &[GroundTruthBox], hf: usize, wf: usize, stride: usize) -> Targets {
    let s = stride as f64;
    let mut heat = vec![0.0; hf * wf];
    let mut owner: Vec<Option<usize>> = vec![None; hf * wf];
    for (b, gt) in boxes.iter().enumerate() {
        let (cx, cy, bw, bh) = (gt.cx / s, gt.cy / s, gt.w / s, gt.h / s);
        let (sx, sy) = (bw / 6.0, bh / 6.0);
        for i in 0..hf {
            for j in 0..wf {
                let dx = (j as f64 + 0.5 - cx) / sx;
                let dy = (i as f64 + 0.5 - cy) / sy;
                let v = (-0.5 * (dx * dx + dy * dy)).exp();
                if v > heat[i * wf + j] {
                    heat[i * wf + j] = v;
                    owner[i * wf + j] = Some(b);
                }
            }
        }
        let ci = (cy.floor().max(0.0) as usize).min(hf - 1);
        let cj = (cx.floor().max(0.0) as usize).min(wf - 1);
        heat[ci * wf + cj] = 1.0;
        owner[ci * wf + cj] = Some(b);
    }
    let mut sizes = vec![0.0; 2 * hf * wf];
    let mut mask = vec![0.0; 2 * hf * wf];
    let mut num_pos = 0;
    for (k, v) in heat.iter_mut().enumerate() {
        if *v < HEAT_CLIP {
            *v = 0.0;
        }
        if *v >= POSITIVE_THRESHOLD {
            let gt = &boxes[owner[k].expect("positive cell has an owning box")];
            sizes[k] = gt.w / s;
            sizes[hf * wf + k] = gt.h / s;
            mask[k] = 1.0;
            mask[hf * wf + k] = 1.0;
            num_pos += 1;
        }
    }
    Targets {
        heat: Tensor::new(&[1, hf, wf], heat).expect("heat shape"),
        sizes: Tensor::new(&[2, hf, wf], sizes).expect("size shape"),
        mask: Tensor::new(&[2, hf, wf], mask).expect("mask shape"),
        num_pos,
    }
}

/// Summed heatmap BCE / `heat_norm` plus `size_weight` × mean L1 size error
/// over positive cells. Images without positives contribute the heatmap term
/// only.
pub fn detection_loss(tape: &mut Tape, out: &HeadOutput, targets: &Targets, cfg: &DetectConfig) -> Result<Var> {
    let bce = tape.bce_with_logits_sum(out.logits, &targets.heat)?;
    let heat = tape.scale(bce, 1.0 / cfg.heat_norm);
    if targets.num_pos == 0 {
        return Ok(heat);
    }
    let want = tape.constant(targets.sizes.clone());
    let mask = tape.constant(targets.mask.clone());
    let diff = tape.sub(out.sizes, want)?;
    let diff = tape.mul(diff, mask)?;
    let l1 = tape.abs(diff);
    let l1 = tape.sum(l1);
    let size = tape.scale(l1, cfg.size_weight / (2 * targets.num_pos) as f64);
    Ok(tape.add(heat, size)?)
}

/// 3×3 peak picking: cells no smaller than any neighbour, score ≥
/// `score_floor`, best `k_max` by score. Boxes are clipped to the image.
pub fn decode(
    heatmap: &Tensor,
    sizes: &Tensor,
    stride: usize,
    k_max: usize,
    score_floor: f64,
    image: (usize, usize),
) -> Vec<PredBox> {
    let (hf, wf) = (heatmap.shape()[1], heatmap.shape()[2]);
    let hm = heatmap.data();
    let mut peaks: Vec<(f64, usize)> = Vec::new();
    for i in 0..hf {
        for j in 0..wf {
            let v = hm[i * wf + j];
            if v < score_floor || !v.is_finite() {
                continue;
            }
            let mut is_peak = true;
            'window: for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let (y, x) = (i as i64 + di, j as i64 + dj);
                    if (di, dj) == (0, 0) || y < 0 || x < 0 || y >= hf as i64 || x >= wf as i64 {
                        continue;
                    }
                    if hm[y as usize * wf + x as usize] > v {
                        is_peak = false;
                        break 'window;
                    }
                }
            }
            if is_peak {
                peaks.push((v, i * wf + j));
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    peaks.truncate(k_max);
    let s = stride as f64;
    let (ih, iw) = (image.0 as f64, image.1 as f64);
    let sz = sizes.data();
    peaks
        .into_iter()
        .map(|(score, k)| {
            let (i, j) = (k / wf, k % wf);
            let cx = (j as f64 + 0.5) * s;
            let cy = (i as f64 + 0.5) * s;
            let w = (sz[k] * s).max(1.0);
            let h = (sz[hf * wf + k] * s).max(1.0);
            let x0 = (cx - w / 2.0).max(0.0);
            let x1 = (cx + w / 2.0).min(iw);
            let y0 = (cy - h / 2.0).max(0.0);
            let y1 = (cy + h / 2.0).min(ih);
            PredBox { cx: (x0 + x1) / 2.0, cy: (y0 + y1) / 2.0, w: x1 - x0, h: y1 - y0, score }
        })
        .collect()
}
