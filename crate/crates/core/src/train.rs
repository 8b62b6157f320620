//! SGD-with-momentum training over the detection loss, with JSON-lines
//! logging and periodic validation FROC.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use satr_autodiff::Tape;
use serde::{Deserialize, Serialize};

use crate::dataset::SynthSample;
use crate::detection::{detection_loss, render_targets};
use crate::error::{CoreError, Result};
use crate::froc::{froc, DetectionSet, FrocResult, ImageDetections};
use crate::model::Detector;
use crate::params::Binder;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch: usize,
    pub log_every: usize,
    pub eval_every: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 1e-2, momentum: 0.9, steps: 2000, batch: 4, log_every: 50, eval_every: 500, clip_norm: Some(20.0) }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(CoreError::config("train.lr must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CoreError::config("train.momentum must lie in [0, 1)"));
        }
        if self.batch == 0 || self.log_every == 0 || self.eval_every == 0 {
            return Err(CoreError::config("train.batch, log_every and eval_every must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(CoreError::config("train.clip_norm must be positive and finite"));
            }
        }
        Ok(())
    }
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: usize,
    pub loss: f64,
    #[serde(rename = "fppi_0.5")]
    pub fppi_0_5: Option<f64>,
    pub fppi_1: Option<f64>,
    pub fppi_2: Option<f64>,
    pub fppi_4: Option<f64>,
    pub avg: Option<f64>,
}

impl LogLine {
    fn new(step: usize, loss: f64, froc: Option<FrocResult>) -> Self {
        let s = froc.map(|f| f.sensitivity);
        LogLine {
            step,
            loss,
            fppi_0_5: s.map(|s| s[0]),
            fppi_1: s.map(|s| s[1]),
            fppi_2: s.map(|s| s[2]),
            fppi_4: s.map(|s| s[3]),
            avg: froc.map(|f| f.average),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LogLine>,
    pub final_loss: f64,
    pub final_val: Option<FrocResult>,
}

/// Mean loss over `batch`, and the gradients of every parameter.
pub fn batch_loss(det: &Detector, batch: &[&SynthSample], with_grads: bool) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(det.params(), with_grads);
    let (hf, wf) = det.head_size();
    let stride = det.stride();
    let mut losses = Vec::with_capacity(batch.len());
    for sample in batch {
        let x = tape.constant(sample.stack.slices().clone());
        let out = det.forward(&mut tape, &mut binder, x)?;
        let targets = render_targets(&sample.boxes, hf, wf, stride);
        losses.push(detection_loss(&mut tape, &out.head, &targets, &det.config().detect)?);
    }
    let stacked = tape.stack(&losses)?;
    let loss = tape.mean(stacked);
    let value = tape.value(loss).item();
    if !with_grads {
        return Ok((value, Vec::new()));
    }
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    let mut grads: Vec<Vec<f64>> = det.params().ids().map(|id| vec![0.0; det.params().get(id).numel()]).collect();
    for (id, g) in binder.grads(&tape) {
        grads[id.index()].copy_from_slice(g);
    }
    Ok((value, grads))
}

/// Mean loss over `samples` without gradients, in chunks of `chunk`.
pub fn mean_loss(det: &Detector, samples: &[SynthSample], chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    for part in samples.chunks(chunk.max(1)) {
        let refs: Vec<&SynthSample> = part.iter().collect();
        total += batch_loss(det, &refs, false)?.0 * part.len() as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Decodes every sample and scores the detections.
pub fn evaluate(det: &Detector, samples: &[SynthSample]) -> Result<FrocResult> {
    let mut set = DetectionSet::default();
    for s in samples {
        set.images.push(ImageDetections { preds: det.detect(&s.stack)?, gts: s.boxes.clone() });
    }
    froc(&set, det.config().detect.iou_thresh)
}

fn clip_scale(grads: &[Vec<f64>], clip: Option<f64>) -> f64 {
    let Some(c) = clip else { return 1.0 };
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > c {
        c / norm
    } else {
        1.0
    }
}

/// Trains in place. Batches are drawn from a seeded reshuffle of
/// `train` each epoch, so the run is a pure function of its inputs.
pub fn train(
    det: &mut Detector,
    train: &[SynthSample],
    val: &[SynthSample],
    cfg: &TrainConfig,
    seed: u64,
    log: &mut dyn Write,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(CoreError::config("the training split is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut velocity: Vec<Vec<f64>> = det.params().ids().map(|id| vec![0.0; det.params().get(id).numel()]).collect();
    let mut report = TrainReport { log: Vec::new(), final_loss: f64::NAN, final_val: None };
    let val_froc = |det: &Detector| -> Result<Option<FrocResult>> {
        if val.iter().all(|s| s.boxes.is_empty()) {
            return Ok(None);
        }
        evaluate(det, val).map(Some)
    };

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads) = batch_loss(det, &batch, true)?;
        if !loss.is_finite() {
            return Err(CoreError::Divergence { step, detail: format!("loss is {loss}") });
        }
        if let Some((id, _)) = det.params().ids().zip(&grads).find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(CoreError::Divergence {
                step,
                detail: format!("non-finite gradient for {}", det.params().name(id)),
            });
        }
        let scale = clip_scale(&grads, cfg.clip_norm);
        for (id, (v, g)) in det.params().ids().collect::<Vec<_>>().into_iter().zip(velocity.iter_mut().zip(&grads)) {
            let p = det.params_mut().get_mut(id).data_mut();
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = cfg.momentum * *v + scale * g;
                *p -= cfg.lr * *v;
            }
        }
        report.final_loss = loss;
        let done = step + 1;
        let eval_now = done % cfg.eval_every == 0 || done == cfg.steps;
        if done % cfg.log_every == 0 || eval_now || step == 0 {
            let f = if eval_now { val_froc(det)? } else { None };
            if eval_now {
                report.final_val = f;
            }
            let line = LogLine::new(done, loss, f);
            writeln!(log, "{}", serde_json::to_string(&line).expect("log line serialises"))
                .map_err(|e| CoreError::io("<metric log>", e))?;
            report.log.push(line);
        }
    }
    Ok(report)
}
