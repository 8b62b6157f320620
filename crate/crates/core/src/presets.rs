//! Named configurations used by tests, checks and benchmarks.

use crate::backbone::BackboneConfig;
use crate::config::RunConfig;
use crate::model::ModelConfig;
use crate::satr::SatrConfig;

/// Tiny model for finite-difference checks: 16×16 input, 2×2 token grid,
/// 4-wide embeddings, 2 heads.
pub fn micro() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synth.height = 16;
    cfg.synth.width = 16;
    cfg.synth.radius = [1.5, 3.5];
    cfg.model.backbone = BackboneConfig { channels: vec![2, 3, 4], share_slice_weights: false, fpn_width: 3 };
    cfg.model.satr = SatrConfig { embed_dim: 4, grid: 2, heads: 2, ..SatrConfig::default() };
    cfg
}

/// Reduced-width model used for the multi-seed ablation on one CPU core.
pub fn ablation() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        backbone: BackboneConfig { channels: vec![8, 16, 32], share_slice_weights: false, fpn_width: 16 },
        satr: SatrConfig { embed_dim: 32, grid: 8, heads: 4, ..SatrConfig::default() },
        ..ModelConfig::default()
    };
    cfg
}
