//! Slice-attention block: patch embeddings per slice and across slices,
//! cross-slice multi-head attention, resampling back to the stage grid and
//! hybrid fusion with the CNN path.

use std::fmt;
use std::str::FromStr;

use satr_autodiff::kernels::PatchGeom;
use satr_autodiff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, StageFeatures, StageSpec};
use crate::error::{CoreError, Result};
use crate::layers::{ConvParams, LayerNormParams, Linear};
use crate::params::{Binder, Init, ParamStore};

/// Rungs of the ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// No attention block; FPN inputs come from slice fusion alone.
    Baseline,
    /// q, k from every slice; v from the all-slice embedding.
    Naive,
    /// As `Naive`, with the key-slice embedding added to the value input.
    #[serde(alias = "value_enh")]
    ValueEnh,
    /// As `ValueEnh`, with the key slice removed from the q/k input.
    Satr,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Naive, Variant::ValueEnh, Variant::Satr];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Naive => "naive",
            Variant::ValueEnh => "value-enh",
            Variant::Satr => "satr",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "naive" => Ok(Variant::Naive),
            "value-enh" | "value_enh" => Ok(Variant::ValueEnh),
            "satr" => Ok(Variant::Satr),
            other => Err(CoreError::config(format!(
                "unknown variant {other:?} (expected baseline, naive, value-enh or satr)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SatrConfig {
    pub embed_dim: usize,
    /// Token grid side; `grid²` tokens per embedding.
    pub grid: usize,
    pub heads: usize,
    /// MLP hidden width as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    pub variant: Variant,
    /// Per-stage enable flags; must have one entry per backbone stage.
    pub stages: Vec<bool>,
    /// Layer norm on `f_msa + a_v` before the MLP.
    pub post_norm: bool,
    pub ln_eps: f64,
}

impl Default for SatrConfig {
    fn default() -> Self {
        SatrConfig {
            embed_dim: 384,
            grid: 16,
            heads: 6,
            mlp_ratio: 4,
            variant: Variant::Satr,
            stages: vec![true; 3],
            post_norm: true,
            ln_eps: 1e-5,
        }
    }
}

impl SatrConfig {
    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self, num_stages: usize, radius: usize) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.grid == 0 || self.mlp_ratio == 0 {
            return Err(CoreError::config("embed_dim, heads, grid and mlp_ratio must be positive"));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(CoreError::config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.stages.len() != num_stages {
            return Err(CoreError::config(format!(
                "satr.stages has {} flags but the backbone has {num_stages} stages",
                self.stages.len()
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(CoreError::config("ln_eps must be positive"));
        }
        if self.variant == Variant::Satr && radius == 0 {
            return Err(CoreError::config("variant satr needs adjacent slices (N >= 1)"));
        }
        Ok(())
    }

    /// Whether stage `m` carries an attention block.
    pub fn enabled(&self, m: usize) -> bool {
        self.variant != Variant::Baseline && self.stages.get(m).copied().unwrap_or(false)
    }
}

/// Token embeddings of one stage, each `[T, d_e]`.
#[derive(Clone, Debug)]
pub struct PatchEmbeddings {
    pub per_slice: Vec<Var>,
    pub all_slice: Var,
    pub key_index: usize,
}

impl PatchEmbeddings {
    pub fn key(&self) -> Var {
        self.per_slice[self.key_index]
    }

    pub fn adjacent(&self) -> Vec<Var> {
        self.per_slice
            .iter()
            .enumerate()
            .filter(|&(s, _)| s != self.key_index)
            .map(|(_, &v)| v)
            .collect()
    }
}

/// Snapshot of one attention evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub stage: usize,
    /// Post-softmax weights `[heads, T, T]`.
    pub weights: Tensor,
    /// Per-head `[T, head_dim]` projections.
    pub queries: Vec<Tensor>,
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
    /// Projected multi-head output `f_msa`, `[T, d_e]`.
    pub msa: Tensor,
}

impl AttentionRecord {
    pub fn heads(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Largest `|row sum − 1|` over every head and query token.
    pub fn max_row_sum_error(&self) -> f64 {
        let t = self.tokens();
        self.weights.data().chunks(t).map(|row| (row.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// Attention block of one backbone stage.
#[derive(Clone, Debug)]
pub struct SatrStage {
    spec: StageSpec,
    cfg: SatrConfig,
    num_slices: usize,
    spatial: (usize, usize),
    single: ConvParams,
    all: ConvParams,
    patch_kernel: (usize, usize),
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    norm: Option<LayerNormParams>,
    mlp_in: Linear,
    mlp_out: Linear,
    project: ConvParams,
    hybrid: ConvParams,
}

impl SatrStage {
    /// `spatial` is this stage's `(H/R^m, W/R^m)`; it fixes the all-slice
    /// kernel extent.
    pub fn new(
        spec: StageSpec,
        cfg: &SatrConfig,
        num_slices: usize,
        spatial: (usize, usize),
        store: &mut ParamStore,
        seed: u64,
    ) -> Self {
        let p = format!("satr.stage{}", spec.index);
        let (c, d) = (spec.channels, cfg.embed_dim);
        let geom = PatchGeom::new(c, num_slices, spatial.0, spatial.1, cfg.grid, cfg.grid);
        let (kh, kw) = (geom.kh, geom.kw);
        let qk_width = match cfg.variant {
            Variant::Satr => (num_slices - 1) * d,
            _ => num_slices * d,
        };
        let hidden = cfg.mlp_ratio * d;
        let hybrid = ConvParams::new(store, &format!("{p}.hybrid"), &[c, c, 2, 1, 1], 1.0, seed);
        // Start from the CNN path: identity on the fusion plane, a small
        // random map on the attention plane.
        {
            let w = store.get_mut(hybrid.weight).data_mut();
            for o in 0..c {
                for i in 0..c {
                    w[(o * c + i) * 2] *= 0.1;
                    w[(o * c + i) * 2 + 1] = if o == i { 1.0 } else { 0.0 };
                }
            }
        }
        SatrStage {
            spec,
            cfg: cfg.clone(),
            num_slices,
            spatial,
            single: ConvParams::new(store, &format!("{p}.single_embed"), &[d, c, 1, 1], 1.0, seed),
            all: ConvParams::new(store, &format!("{p}.all_embed"), &[d, c, num_slices, kh, kw], 1.0, seed),
            patch_kernel: (kh, kw),
            q: Linear::new(store, &format!("{p}.query"), qk_width, d, 1.0, seed),
            k: Linear::new(store, &format!("{p}.key"), qk_width, d, 1.0, seed),
            v: Linear::new(store, &format!("{p}.value"), d, d, 1.0, seed),
            out: Linear::new(store, &format!("{p}.attn_out"), d, d, 1.0, seed),
            norm: cfg.post_norm.then(|| LayerNormParams::new(store, &format!("{p}.norm"), d, seed)),
            mlp_in: Linear::new(store, &format!("{p}.mlp_in"), d, hidden, 2.0, seed),
            mlp_out: Linear::new(store, &format!("{p}.mlp_out"), hidden, d, 1.0, seed),
            project: ConvParams::new(store, &format!("{p}.project"), &[c, d, 1, 1], 1.0, seed),
            hybrid,
        }
    }

    pub fn spec(&self) -> StageSpec {
        self.spec
    }

    pub fn single_params(&self) -> ConvParams {
        self.single
    }

    pub fn all_params(&self) -> ConvParams {
        self.all
    }

    pub fn value_params(&self) -> Linear {
        self.v
    }

    pub fn project_params(&self) -> ConvParams {
        self.project
    }

    pub fn hybrid_params(&self) -> ConvParams {
        self.hybrid
    }

    /// Spatial extent `(kh, kw)` of the all-slice kernel.
    pub fn patch_kernel(&self) -> (usize, usize) {
        self.patch_kernel
    }

    /// `[C, h, w]` → `[T, d_e]`: 1×1 conv then adaptive pooling onto the
    /// token grid, tokens row-major. Pooling runs first; both maps are
    /// linear and the pooling weights sum to one, so the order is immaterial.
    pub fn single_slice_embed(&self, tape: &mut Tape, binder: &mut Binder, f_s: Var) -> Result<Var> {
        let g = self.cfg.grid;
        let pooled = tape.grid_pool2d(f_s, g, g)?;
        let e = self.single.conv2d(tape, binder, pooled, 1, 0)?;
        let e = tape.reshape(e, &[self.cfg.embed_dim, g * g])?;
        Ok(tape.transpose(e)?)
    }

    /// `[S, C, h, w]` → `[T, d_e]`: a 3D convolution spanning every slice
    /// with one spatial bin per token.
    pub fn all_slice_embed(&self, tape: &mut Tape, binder: &mut Binder, per_slice: Var) -> Result<Var> {
        let x = tape.permute(per_slice, &[1, 0, 2, 3])?;
        let (patches, geom) = tape.binned_patches(x, self.cfg.grid, self.cfg.grid)?;
        if (geom.kh, geom.kw) != self.patch_kernel || geom.d != self.num_slices {
            return Err(CoreError::config(format!(
                "stage {} built for {}x{} maps of {} slices, got {}x{} of {}",
                self.spec.index, self.spatial.0, self.spatial.1, self.num_slices, geom.h, geom.w, geom.d
            )));
        }
        let w = binder.var(tape, self.all.weight);
        let b = binder.var(tape, self.all.bias);
        let w = tape.reshape(w, &[self.cfg.embed_dim, geom.width()])?;
        let wt = tape.transpose(w)?;
        let e = tape.matmul(patches, wt)?;
        Ok(tape.add_bias(e, b)?)
    }

    pub fn embed(&self, tape: &mut Tape, binder: &mut Binder, f: &StageFeatures) -> Result<PatchEmbeddings> {
        let s = tape.shape(f.per_slice)[0];
        let mut per_slice = Vec::with_capacity(s);
        for i in 0..s {
            let f_s = tape.select(f.per_slice, 0, i)?;
            per_slice.push(self.single_slice_embed(tape, binder, f_s)?);
        }
        let all_slice = self.all_slice_embed(tape, binder, f.per_slice)?;
        Ok(PatchEmbeddings { per_slice, all_slice, key_index: s / 2 })
    }

    /// Query/key input and value input for this stage's variant.
    pub fn attention_inputs(&self, tape: &mut Tape, e: &PatchEmbeddings) -> Result<(Var, Var)> {
        let qk = match self.cfg.variant {
            Variant::Satr => tape.concat(&e.adjacent(), 1)?,
            _ => tape.concat(&e.per_slice, 1)?,
        };
        let v = match self.cfg.variant {
            Variant::Naive => e.all_slice,
            _ => tape.add(e.all_slice, e.key())?,
        };
        Ok((qk, v))
    }

    /// The value head `H_v`.
    pub fn value_head(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        self.v.forward(tape, binder, x)
    }

    /// Multi-head cross-slice attention followed by the MLP residual:
    /// `f_tr = MLP(LN(f_msa + a_v)) + f_msa`.
    pub fn slice_attention(&self, tape: &mut Tape, binder: &mut Binder, e: &PatchEmbeddings) -> Result<(Var, AttentionRecord)> {
        let (qk_in, v_in) = self.attention_inputs(tape, e)?;
        let a_q = self.q.forward(tape, binder, qk_in)?;
        let a_k = self.k.forward(tape, binder, qk_in)?;
        let a_v = self.value_head(tape, binder, v_in)?;
        let hd = self.cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.cfg.heads);
        let mut probs = Vec::with_capacity(self.cfg.heads);
        let mut record = AttentionRecord {
            stage: self.spec.index,
            weights: Tensor::scalar(0.0),
            queries: Vec::new(),
            keys: Vec::new(),
            values: Vec::new(),
            msa: Tensor::scalar(0.0),
        };
        for h in 0..self.cfg.heads {
            let q = tape.narrow(a_q, 1, h * hd, hd)?;
            let k = tape.narrow(a_k, 1, h * hd, hd)?;
            let v = tape.narrow(a_v, 1, h * hd, hd)?;
            let kt = tape.transpose(k)?;
            let logits = tape.matmul(q, kt)?;
            let logits = tape.scale(logits, scale);
            let p = tape.softmax_lastdim(logits)?;
            outs.push(tape.matmul(p, v)?);
            probs.push(p);
            record.queries.push(tape.value(q).clone());
            record.keys.push(tape.value(k).clone());
            record.values.push(tape.value(v).clone());
        }
        let heads = tape.concat(&outs, 1)?;
        let f_msa = self.out.forward(tape, binder, heads)?;
        let stacked = tape.stack(&probs)?;
        record.weights = tape.value(stacked).clone();
        record.msa = tape.value(f_msa).clone();

        let mut x = tape.add(f_msa, a_v)?;
        if let Some(norm) = &self.norm {
            x = norm.forward(tape, binder, x, self.cfg.ln_eps)?;
        }
        let hidden = self.mlp_in.forward(tape, binder, x)?;
        let hidden = tape.gelu(hidden);
        let f_mlp = self.mlp_out.forward(tape, binder, hidden)?;
        Ok((tape.add(f_mlp, f_msa)?, record))
    }

    /// `[T, d_e]` → `[C^m, h, w]`: tokens back onto the `g × g` grid,
    /// 1×1 projection to `C^m`, bilinear resize to the stage size. The
    /// projection is applied before resizing, which is equivalent because
    /// the interpolation weights sum to one.
    pub fn satr_output(&self, tape: &mut Tape, binder: &mut Binder, f_tr: Var) -> Result<Var> {
        let g = self.cfg.grid;
        let x = tape.transpose(f_tr)?;
        let x = tape.reshape(x, &[self.cfg.embed_dim, g, g])?;
        let y = self.project.conv2d(tape, binder, x, 1, 0)?;
        if self.spatial == (g, g) {
            return Ok(y);
        }
        Ok(tape.bilinear_resize(y, self.spatial.0, self.spatial.1)?)
    }

    /// Stacks `[f_satr; f_fuse]` on a depth axis of two and collapses it
    /// with the stage's `2×1×1` convolution.
    pub fn hybrid_fuse(&self, tape: &mut Tape, binder: &mut Binder, f_satr: Var, f_fuse: Var) -> Result<Var> {
        hybrid_fuse(tape, binder, self.hybrid, f_satr, f_fuse)
    }

    /// Full block: embeddings, attention, resampling and hybrid fusion.
    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, f: &StageFeatures, f_fuse: Var) -> Result<(Var, AttentionRecord)> {
        let e = self.embed(tape, binder, f)?;
        let (f_tr, record) = self.slice_attention(tape, binder, &e)?;
        let f_satr = self.satr_output(tape, binder, f_tr)?;
        Ok((self.hybrid_fuse(tape, binder, f_satr, f_fuse)?, record))
    }
}

/// `l = Conv3d_{2×1×1}([f_satr; f_fuse])` with weight `[C, C, 2, 1, 1]`.
pub fn hybrid_fuse(tape: &mut Tape, binder: &mut Binder, conv: ConvParams, f_satr: Var, f_fuse: Var) -> Result<Var> {
    let (a, b) = (tape.shape(f_satr), tape.shape(f_fuse));
    if a != b || a.len() != 3 {
        return Err(CoreError::Tensor(satr_autodiff::TensorError::dim(
            "hybrid_fuse",
            format!("inputs must share a [C, h, w] shape, got {a:?} and {b:?}"),
        )));
    }
    let shape = a.to_vec();
    let x = tape.stack(&[f_satr, f_fuse])?;
    let x = tape.permute(x, &[1, 0, 2, 3])?;
    let y = conv.conv3d(tape, binder, x, [1, 1, 1])?;
    Ok(tape.reshape(y, &shape)?)
}

/// Attention blocks for every enabled stage.
#[derive(Clone, Debug)]
pub struct SatrBlocks {
    cfg: SatrConfig,
    stages: Vec<Option<SatrStage>>,
}

impl SatrBlocks {
    pub fn new(
        cfg: &SatrConfig,
        stages: &[StageSpec],
        radius: usize,
        height: usize,
        width: usize,
        store: &mut ParamStore,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate(stages.len(), radius)?;
        let blocks = stages
            .iter()
            .map(|spec| {
                cfg.enabled(spec.index).then(|| {
                    SatrStage::new(*spec, cfg, 2 * radius + 1, spec.spatial(height, width), store, seed)
                })
            })
            .collect();
        Ok(SatrBlocks { cfg: cfg.clone(), stages: blocks })
    }

    pub fn config(&self) -> &SatrConfig {
        &self.cfg
    }

    pub fn stage(&self, m: usize) -> Option<&SatrStage> {
        self.stages.get(m).and_then(Option::as_ref)
    }

    /// FPN inputs `l_fpn^m` plus the attention record of each enabled stage.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        backbone: &Backbone,
        feats: &[StageFeatures],
    ) -> Result<(Vec<Var>, Vec<Option<AttentionRecord>>)> {
        let mut layers = Vec::with_capacity(feats.len());
        let mut records = Vec::with_capacity(feats.len());
        for f in feats {
            let f_fuse = backbone.fuse_slices(tape, binder, f)?;
            match self.stage(f.stage.index) {
                Some(block) => {
                    let (l, rec) = block.forward(tape, binder, f, f_fuse)?;
                    layers.push(l);
                    records.push(Some(rec));
                }
                None => {
                    layers.push(f_fuse);
                    records.push(None);
                }
            }
        }
        Ok((layers, records))
    }
}

/// Fresh zero-initialised hybrid convolution, for tests that drive
/// [`hybrid_fuse`] with hand-set kernels.
pub fn hybrid_params(store: &mut ParamStore, name: &str, channels: usize) -> ConvParams {
    let weight = store.init(&format!("{name}.weight"), &[channels, channels, 2, 1, 1], Init::Zeros, 0);
    let bias = store.init(&format!("{name}.bias"), &[channels], Init::Zeros, 0);
    ConvParams { weight, bias }
}
