//! The full detector: backbone, optional attention blocks, pyramid, head.

use std::path::Path;

use satr_autodiff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, Fpn, SliceStack, StageFeatures};
use crate::detection::{decode, DetectConfig, Head, HeadOutput, PredBox};
use crate::error::{CoreError, Result};
use crate::params::{Binder, ParamStore};
use crate::satr::{AttentionRecord, SatrBlocks, SatrConfig, Variant};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub satr: SatrConfig,
    pub detect: DetectConfig,
}

impl ModelConfig {
    pub fn validate(&self, radius: usize) -> Result<()> {
        self.backbone.validate()?;
        self.satr.validate(self.backbone.channels.len(), radius)?;
        self.detect.validate()
    }
}

/// Everything a forward pass leaves on the tape.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub stages: Vec<StageFeatures>,
    /// `l_fpn^m` per stage.
    pub fpn_inputs: Vec<Var>,
    pub pyramid: Vec<Var>,
    pub head: HeadOutput,
    pub attention: Vec<Option<AttentionRecord>>,
}

/// Dense predictions for one stack, off the tape.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub heatmap: Tensor,
    pub sizes: Tensor,
    pub attention: Vec<Option<AttentionRecord>>,
}

#[derive(Clone, Debug)]
pub struct Detector {
    cfg: ModelConfig,
    radius: usize,
    height: usize,
    width: usize,
    store: ParamStore,
    backbone: Backbone,
    satr: SatrBlocks,
    fpn: Fpn,
    head: Head,
}

#[derive(Serialize, Deserialize)]
struct DetectorMeta {
    model: ModelConfig,
    radius: usize,
    height: usize,
    width: usize,
}

impl Detector {
    pub fn new(cfg: &ModelConfig, radius: usize, height: usize, width: usize, seed: u64) -> Result<Self> {
        cfg.validate(radius)?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&cfg.backbone, radius, &mut store, seed)?;
        backbone.check_input(height, width)?;
        let satr = SatrBlocks::new(&cfg.satr, backbone.stages(), radius, height, width, &mut store, seed)?;
        let fpn = Fpn::new(backbone.stages(), cfg.backbone.fpn_width, &mut store, seed);
        let head = Head::new(cfg.backbone.fpn_width, &cfg.detect, &mut store, seed);
        Ok(Detector { cfg: cfg.clone(), radius, height, width, store, backbone, satr, fpn, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.cfg.satr.variant
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Pixels per head cell.
    pub fn stride(&self) -> usize {
        self.backbone.stages()[0].ratio
    }

    pub fn head_size(&self) -> (usize, usize) {
        (self.height / self.stride(), self.width / self.stride())
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn satr(&self) -> &SatrBlocks {
        &self.satr
    }

    pub fn fpn(&self) -> &Fpn {
        &self.fpn
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    /// `slices` is a `[2N+1, 1, H, W]` tape value.
    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, slices: Var) -> Result<ForwardOutput> {
        let stages = self.backbone.forward(tape, binder, slices)?;
        let (fpn_inputs, attention) = self.satr.forward(tape, binder, &self.backbone, &stages)?;
        let pyramid = self.fpn.forward(tape, binder, &fpn_inputs)?;
        let head = self.head.forward(tape, binder, pyramid[0])?;
        Ok(ForwardOutput { stages, fpn_inputs, pyramid, head, attention })
    }

    pub fn predict(&self, stack: &SliceStack) -> Result<Prediction> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store, false);
        let x = tape.constant(stack.slices().clone());
        let out = self.forward(&mut tape, &mut binder, x)?;
        Ok(Prediction {
            heatmap: tape.value(out.head.heatmap).clone(),
            sizes: tape.value(out.head.sizes).clone(),
            attention: out.attention,
        })
    }

    pub fn detect(&self, stack: &SliceStack) -> Result<Vec<PredBox>> {
        let p = self.predict(stack)?;
        let d = &self.cfg.detect;
        Ok(decode(&p.heatmap, &p.sizes, self.stride(), d.k_max, d.score_floor, (self.height, self.width)))
    }

    /// Writes the checkpoint; `extra` is stored alongside the model metadata.
    pub fn save(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = DetectorMeta { model: self.cfg.clone(), radius: self.radius, height: self.height, width: self.width };
        let meta = serde_json::json!({ "detector": meta, "variant": self.variant(), "run": extra });
        self.store.save(dir, meta)
    }

    /// Rebuilds the detector from a checkpoint; returns the `extra` metadata.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let (store, meta) = ParamStore::load(dir)?;
        let manifest = dir.join(crate::params::MANIFEST_FILE);
        let dm: DetectorMeta = serde_json::from_value(meta.get("detector").cloned().unwrap_or_default())
            .map_err(|e| CoreError::format(&manifest, format!("detector metadata: {e}")))?;
        let mut det = Detector::new(&dm.model, dm.radius, dm.height, dm.width, 0)
            .map_err(|e| CoreError::format(&manifest, e))?;
        if det.store.names() != store.names() {
            return Err(CoreError::format(&manifest, "parameter list does not match the recorded architecture"));
        }
        for id in store.ids() {
            if store.get(id).shape() != det.store.get(id).shape() {
                return Err(CoreError::format(&manifest, format!("parameter {} has the wrong shape", store.name(id))));
            }
        }
        det.store = store;
        let extra = meta.get("run").cloned().unwrap_or(serde_json::Value::Null);
        Ok((det, extra))
    }
}
