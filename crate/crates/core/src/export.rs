//! Attention export: raw weights per (stage, head), a per-token attention
//! mass heatmap as 8-bit PGM, and a JSON index.

use std::fs;
use std::path::Path;

use satr_autodiff::{io, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::satr::{AttentionRecord, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportEntry {
    pub stage: usize,
    pub head: usize,
    pub variant: Variant,
    pub token_grid: usize,
    pub weights: String,
    pub heatmap: String,
}

/// Attention mass received by each key token, `Σ_q w[q, k] / T`, laid out
/// on the token grid.
pub fn attention_mass(weights: &[f64], tokens: usize) -> Vec<f64> {
    let mut mass = vec![0.0; tokens];
    for row in weights.chunks(tokens) {
        for (m, w) in mass.iter_mut().zip(row) {
            *m += w;
        }
    }
    mass.iter().map(|m| m / tokens as f64).collect()
}

/// Binary PGM (P5) of `values` rescaled to 0..=255.
pub fn pgm(values: &[f64], width: usize, height: usize) -> Vec<u8> {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 }));
    out
}

/// Writes every record under `dir`; returns the index entries.
pub fn export_attention(records: &[AttentionRecord], variant: Variant, grid: usize, dir: &Path) -> Result<Vec<ExportEntry>> {
    if records.is_empty() {
        return Err(CoreError::config("no attention to export"));
    }
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut entries = Vec::new();
    for rec in records {
        let t = rec.tokens();
        for h in 0..rec.heads() {
            let w = &rec.weights.data()[h * t * t..(h + 1) * t * t];
            let weights = format!("attn_stage{}_head{h}.bin", rec.stage);
            let heatmap = format!("attn_stage{}_head{h}.pgm", rec.stage);
            let tensor = Tensor::new(&[t, t], w.to_vec())?;
            let path = dir.join(&weights);
            fs::write(&path, io::to_bytes(&tensor)).map_err(|e| CoreError::io(&path, e))?;
            let path = dir.join(&heatmap);
            fs::write(&path, pgm(&attention_mass(w, t), grid, grid)).map_err(|e| CoreError::io(&path, e))?;
            entries.push(ExportEntry { stage: rec.stage, head: h, variant, token_grid: grid, weights, heatmap });
        }
    }
    let path = dir.join("index.json");
    let text = serde_json::to_string_pretty(&entries).expect("index serialises");
    fs::write(&path, text).map_err(|e| CoreError::io(&path, e))?;
    Ok(entries)
}
