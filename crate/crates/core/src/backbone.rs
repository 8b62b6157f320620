//! Per-slice CNN stages, cross-slice fusion convolutions and the
//! top-down feature pyramid that consumes them.

use satr_autodiff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::layers::ConvParams;
use crate::params::{Binder, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Channel count per stage; stage `m` downsamples by `2^(m+1)`.
    pub channels: Vec<usize>,
    /// One set of block weights for every slice instead of one per slice.
    pub share_slice_weights: bool,
    /// Common channel width of the pyramid levels.
    pub fpn_width: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { channels: vec![32, 64, 128], share_slice_weights: false, fpn_width: 64 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(CoreError::config(format!("backbone channels must be positive, got {:?}", self.channels)));
        }
        if self.fpn_width == 0 {
            return Err(CoreError::config("fpn_width must be positive"));
        }
        Ok(())
    }

    pub fn stages(&self) -> Vec<StageSpec> {
        self.channels
            .iter()
            .enumerate()
            .map(|(index, &channels)| StageSpec { index, channels, ratio: 1 << (index + 1) })
            .collect()
    }
}

/// Stage `m` of the backbone: its output channels `C^m` and total
/// downsampling ratio `R^m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub index: usize,
    pub channels: usize,
    pub ratio: usize,
}

impl StageSpec {
    pub fn spatial(&self, height: usize, width: usize) -> (usize, usize) {
        (height / self.ratio, width / self.ratio)
    }
}

/// Multi-slice input: `2N+1` slices of one channel, key slice at the centre.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack {
    slices: Tensor,
    radius: usize,
}

impl SliceStack {
    /// `slices` must be `[2N+1, 1, H, W]`.
    pub fn new(slices: Tensor, radius: usize) -> Result<Self> {
        match slices.shape() {
            &[s, 1, _, _] if s == 2 * radius + 1 => Ok(SliceStack { slices, radius }),
            s => Err(CoreError::config(format!("slice stack for N={radius} must be [{}, 1, H, W], got {s:?}", 2 * radius + 1))),
        }
    }

    pub fn slices(&self) -> &Tensor {
        &self.slices
    }

    pub fn into_slices(self) -> Tensor {
        self.slices
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn key_index(&self) -> usize {
        self.radius
    }

    pub fn num_slices(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn height(&self) -> usize {
        self.slices.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.slices.shape()[3]
    }
}

/// Stage output for every slice, `[2N+1, C^m, H/R^m, W/R^m]`.
#[derive(Clone, Copy, Debug)]
pub struct StageFeatures {
    pub per_slice: Var,
    pub stage: StageSpec,
}

#[derive(Clone, Copy, Debug)]
struct SliceBlock {
    conv_a: ConvParams,
    conv_b: ConvParams,
}

impl SliceBlock {
    fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        let y = self.conv_a.conv2d(tape, binder, x, 1, 1)?;
        let y = tape.relu(y);
        let y = self.conv_b.conv2d(tape, binder, y, 2, 1)?;
        Ok(tape.relu(y))
    }
}

/// Independent per-slice CNN blocks followed, per stage, by a
/// `(2N+1)×1×1` fusion convolution across slices.
#[derive(Clone, Debug)]
pub struct Backbone {
    stages: Vec<StageSpec>,
    /// `blocks[m][s]`: block of stage `m` applied to slice `s`.
    blocks: Vec<Vec<SliceBlock>>,
    fusion: Vec<ConvParams>,
    num_slices: usize,
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, radius: usize, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let stages = cfg.stages();
        let num_slices = 2 * radius + 1;
        let mut blocks = Vec::with_capacity(stages.len());
        let mut fusion = Vec::with_capacity(stages.len());
        let mut in_ch = 1;
        for spec in &stages {
            let c = spec.channels;
            let make = |store: &mut ParamStore, tag: &str| SliceBlock {
                conv_a: ConvParams::new(store, &format!("backbone.stage{}.{tag}.conv_a", spec.index), &[c, in_ch, 3, 3], 2.0, seed),
                conv_b: ConvParams::new(store, &format!("backbone.stage{}.{tag}.conv_b", spec.index), &[c, c, 3, 3], 2.0, seed),
            };
            let stage_blocks = if cfg.share_slice_weights {
                vec![make(store, "shared"); num_slices]
            } else {
                (0..num_slices).map(|s| make(store, &format!("slice{s}"))).collect()
            };
            blocks.push(stage_blocks);
            fusion.push(ConvParams::new(
                store,
                &format!("backbone.stage{}.fuse", spec.index),
                &[c, c, num_slices, 1, 1],
                1.0,
                seed,
            ));
            in_ch = c;
        }
        Ok(Backbone { stages, blocks, fusion, num_slices })
    }

    pub fn stages(&self) -> &[StageSpec] {
        &self.stages
    }

    pub fn num_slices(&self) -> usize {
        self.num_slices
    }

    /// Checks that `H` and `W` are divisible by the deepest ratio.
    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let deepest = self.stages.last().map(|s| s.ratio).unwrap_or(1);
        if height % deepest != 0 || width % deepest != 0 || height == 0 || width == 0 {
            return Err(CoreError::config(format!(
                "input {height}x{width} is not divisible by the deepest downsampling ratio {deepest}"
            )));
        }
        Ok(())
    }

    /// Runs every slice through its own blocks; `slices` is `[2N+1, 1, H, W]`.
    /// Slice `s` of every stage depends on input slice `s` only.
    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, slices: Var) -> Result<Vec<StageFeatures>> {
        let (s, h, w) = match tape.shape(slices) {
            &[s, 1, h, w] => (s, h, w),
            other => return Err(CoreError::config(format!("backbone input must be [S, 1, H, W], got {other:?}"))),
        };
        if s != self.num_slices {
            return Err(CoreError::config(format!("backbone built for {} slices, got {s}", self.num_slices)));
        }
        self.check_input(h, w)?;
        let mut current: Vec<Var> = (0..s).map(|i| tape.select(slices, 0, i)).collect::<std::result::Result<_, _>>()?;
        let mut out = Vec::with_capacity(self.stages.len());
        for (spec, stage_blocks) in self.stages.iter().zip(&self.blocks) {
            for (x, block) in current.iter_mut().zip(stage_blocks) {
                *x = block.forward(tape, binder, *x)?;
            }
            let per_slice = tape.stack(&current)?;
            out.push(StageFeatures { per_slice, stage: *spec });
        }
        Ok(out)
    }

    /// Collapses the slice axis with the stage's `(2N+1)×1×1` convolution,
    /// giving `[C^m, H/R^m, W/R^m]`.
    pub fn fuse_slices(&self, tape: &mut Tape, binder: &mut Binder, f: &StageFeatures) -> Result<Var> {
        let x = tape.permute(f.per_slice, &[1, 0, 2, 3])?;
        let y = self.fusion[f.stage.index].conv3d(tape, binder, x, [1, 1, 1])?;
        let shape = tape.shape(y).to_vec();
        Ok(tape.reshape(y, &[shape[0], shape[2], shape[3]])?)
    }

    pub fn fusion_params(&self, stage: usize) -> ConvParams {
        self.fusion[stage]
    }
}

/// Top-down pyramid: 1×1 laterals to a common width, nearest ×2
/// upsampling with addition, then a 3×3 smoothing convolution per level.
#[derive(Clone, Debug)]
pub struct Fpn {
    laterals: Vec<ConvParams>,
    smooth: Vec<ConvParams>,
    width: usize,
}

impl Fpn {
    pub fn new(stages: &[StageSpec], width: usize, store: &mut ParamStore, seed: u64) -> Self {
        let laterals = stages
            .iter()
            .map(|s| ConvParams::new(store, &format!("fpn.lateral{}", s.index), &[width, s.channels, 1, 1], 1.0, seed))
            .collect();
        let smooth = stages
            .iter()
            .map(|s| ConvParams::new(store, &format!("fpn.smooth{}", s.index), &[width, width, 3, 3], 1.0, seed))
            .collect();
        Fpn { laterals, smooth, width }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `layers[m]` is the level-`m` input `[C^m, H/R^m, W/R^m]`; each level
    /// must be exactly half the spatial size of the previous one.
    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, layers: &[Var]) -> Result<Vec<Var>> {
        if layers.len() != self.laterals.len() {
            return Err(CoreError::config(format!("FPN built for {} levels, got {}", self.laterals.len(), layers.len())));
        }
        for pair in layers.windows(2) {
            let (a, b) = (tape.shape(pair[0]), tape.shape(pair[1]));
            if a.len() != 3 || b.len() != 3 || a[1] != 2 * b[1] || a[2] != 2 * b[2] {
                return Err(CoreError::config(format!("FPN levels {a:?} and {b:?} are not related by a factor of 2")));
            }
        }
        let mut merged = vec![None; layers.len()];
        let mut above: Option<Var> = None;
        for m in (0..layers.len()).rev() {
            let lat = self.laterals[m].conv2d(tape, binder, layers[m], 1, 0)?;
            let p = match above {
                None => lat,
                Some(top) => {
                    let shape = tape.shape(lat).to_vec();
                    let up = tape.upsample_nearest(top, shape[1], shape[2])?;
                    tape.add(lat, up)?
                }
            };
            merged[m] = Some(p);
            above = Some(p);
        }
        merged
            .into_iter()
            .zip(&self.smooth)
            .map(|(p, conv)| conv.conv2d(tape, binder, p.expect("every level merged"), 1, 1))
            .collect()
    }
}
