//! Synthetic volumes: smooth background, noise and ellipsoidal lesions
//! with tapered edges, plus the analytic boxes they cut on each slice.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use satr_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::SliceStack;
use crate::detection::GroundTruthBox;
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive lesion count range.
    pub lesions: [usize; 2],
    /// In-plane semi-axis range, pixels.
    pub radius: [f64; 2],
    /// Through-plane semi-axis range, slices.
    pub depth_radius: [f64; 2],
    /// Additive intensity of a lesion core.
    pub contrast: [f64; 2],
    pub noise_std: f64,
    /// Background intensity range before noise.
    pub background: [f64; 2],
    /// In-plane frequency range of the background modes, cycles per image.
    pub background_freq: [f64; 2],
    /// Largest through-plane frequency of the background, cycles per volume.
    pub background_depth_freq: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            depth: 9,
            height: 64,
            width: 64,
            lesions: [1, 3],
            radius: [3.0, 10.0],
            depth_radius: [1.0, 3.0],
            contrast: [0.2, 0.6],
            noise_std: 0.05,
            background: [0.25, 0.55],
            background_freq: [1.0, 4.0],
            background_depth_freq: 0.5,
        }
    }
}

fn ordered(name: &str, r: [f64; 2]) -> Result<()> {
    if r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] {
        Ok(())
    } else {
        Err(CoreError::config(format!("synth.{name} range {r:?} is not ordered")))
    }
}

impl SynthConfig {
    pub fn validate(&self, radius: usize) -> Result<()> {
        if self.depth < 2 * radius + 1 {
            return Err(CoreError::config(format!(
                "volume depth {} is smaller than the slice window {}",
                self.depth,
                2 * radius + 1
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(CoreError::config("volume height and width must be positive"));
        }
        if self.lesions[0] > self.lesions[1] {
            return Err(CoreError::config(format!("synth.lesions range {:?} is not ordered", self.lesions)));
        }
        ordered("radius", self.radius)?;
        ordered("depth_radius", self.depth_radius)?;
        ordered("contrast", self.contrast)?;
        ordered("background", self.background)?;
        ordered("background_freq", self.background_freq)?;
        if self.background_freq[0] < 0.0 || !(self.background_depth_freq >= 0.0) {
            return Err(CoreError::config("background frequencies must be nonnegative"));
        }
        if self.radius[0] <= 0.0 || self.depth_radius[0] <= 0.0 {
            return Err(CoreError::config("lesion radii must be positive"));
        }
        let limit = self.height.min(self.width) as f64 / 4.0;
        if self.radius[1] >= limit {
            return Err(CoreError::config(format!(
                "lesion radius {} must stay below a quarter of the image side ({limit})",
                self.radius[1]
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(CoreError::config("noise_std must be nonnegative"));
        }
        Ok(())
    }
}

/// Axis-aligned ellipsoid; `x, y` in pixels (pixel `j` has centre `j + 0.5`),
/// `z` in slice indices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
    pub contrast: f64,
}

/// Flat core out to this normalised radius, cosine taper beyond.
const CORE: f64 = 0.6;

impl Lesion {
    /// Normalised profile in `[0, 1]` at a point.
    pub fn profile(&self, x: f64, y: f64, z: f64) -> f64 {
        let r2 = ((x - self.cx) / self.rx).powi(2) + ((y - self.cy) / self.ry).powi(2) + ((z - self.cz) / self.rz).powi(2);
        if r2 >= 1.0 {
            return 0.0;
        }
        let r = r2.sqrt();
        if r <= CORE {
            1.0
        } else {
            0.5 * (1.0 + (PI * (r - CORE) / (1.0 - CORE)).cos())
        }
    }

    /// Bounding box of the ellipse cut by plane `z = slice`, if any.
    pub fn box_at(&self, slice: usize) -> Option<GroundTruthBox> {
        let dz = (slice as f64 - self.cz) / self.rz;
        if dz.abs() >= 1.0 {
            return None;
        }
        let f = (1.0 - dz * dz).sqrt();
        Some(GroundTruthBox { cx: self.cx, cy: self.cy, w: 2.0 * self.rx * f, h: 2.0 * self.ry * f })
    }
}

/// Boxes on `key_index` for every lesion intersecting that plane.
pub fn render_boxes(lesions: &[Lesion], key_index: usize) -> Vec<GroundTruthBox> {
    lesions.iter().filter_map(|l| l.box_at(key_index)).collect()
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        // Still consume a draw so later lesions do not shift.
        let _: f64 = rng.gen();
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

/// A `[D, H, W]` volume and its lesions, fully determined by `seed`.
/// Background, noise and lesions draw from separate streams, so changing
/// lesion parameters leaves the background untouched.
pub fn generate_volume(cfg: &SynthConfig, seed: u64) -> (Tensor, Vec<Lesion>) {
    let (d, h, w) = (cfg.depth, cfg.height, cfg.width);
    let mut bg_rng = stream(seed, 1);
    let mut noise_rng = stream(seed, 2);
    let mut lesion_rng = stream(seed, 3);

    // Separable modes: blob lattices in-plane that drift slowly through the
    // volume, so a single slice shows lesion-sized bumps that are not lesions.
    let modes: Vec<([f64; 3], [f64; 3], f64)> = (0..3)
        .map(|_| {
            let freq = [
                uniform(&mut bg_rng, cfg.background_freq),
                uniform(&mut bg_rng, cfg.background_freq),
                uniform(&mut bg_rng, [0.0, cfg.background_depth_freq]),
            ];
            let phase = [bg_rng.gen_range(0.0..2.0 * PI), bg_rng.gen_range(0.0..2.0 * PI), bg_rng.gen_range(0.0..2.0 * PI)];
            (freq, phase, bg_rng.gen_range(0.5..1.0))
        })
        .collect();
    let mut field = vec![0.0; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [(x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64, z as f64 / d as f64];
                field[(z * h + y) * w + x] = modes
                    .iter()
                    .map(|(f, ph, amp)| amp * (0..3).map(|a| (2.0 * PI * f[a] * p[a] + ph[a]).cos()).product::<f64>())
                    .sum();
            }
        }
    }
    let (lo, hi) = field.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let [b0, b1] = cfg.background;
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("valid noise std");
    for v in field.iter_mut() {
        *v = b0 + (b1 - b0) * (*v - lo) / span + noise.sample(&mut noise_rng);
    }

    let count = lesion_rng.gen_range(cfg.lesions[0]..=cfg.lesions[1]);
    let lesions: Vec<Lesion> = (0..count)
        .map(|_| {
            let rx = uniform(&mut lesion_rng, cfg.radius);
            let ry = uniform(&mut lesion_rng, cfg.radius);
            let rz = uniform(&mut lesion_rng, cfg.depth_radius);
            let cx = uniform(&mut lesion_rng, [rx, w as f64 - rx]);
            let cy = uniform(&mut lesion_rng, [ry, h as f64 - ry]);
            let cz = uniform(&mut lesion_rng, [0.0, (d - 1) as f64]);
            let contrast = uniform(&mut lesion_rng, cfg.contrast);
            Lesion { cx, cy, cz, rx, ry, rz, contrast }
        })
        .collect();
    for l in &lesions {
        let x0 = (l.cx - l.rx).floor().max(0.0) as usize;
        let x1 = ((l.cx + l.rx).ceil() as usize).min(w);
        let y0 = (l.cy - l.ry).floor().max(0.0) as usize;
        let y1 = ((l.cy + l.ry).ceil() as usize).min(h);
        for z in 0..d {
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = l.profile(x as f64 + 0.5, y as f64 + 0.5, z as f64);
                    field[(z * h + y) * w + x] += l.contrast * p;
                }
            }
        }
    }
    for v in field.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    (Tensor::new(&[d, h, w], field).expect("volume shape"), lesions)
}

/// Slices `key − N ..= key + N` of a `[D, H, W]` volume as a stack.
pub fn slice_window(volume: &Tensor, key_index: usize, radius: usize) -> Result<SliceStack> {
    let (d, h, w) = match volume.shape() {
        &[d, h, w] => (d, h, w),
        s => return Err(CoreError::config(format!("volume must be [D, H, W], got {s:?}"))),
    };
    if key_index < radius || key_index + radius >= d {
        return Err(CoreError::Index(format!(
            "key slice {key_index} with radius {radius} leaves the volume of depth {d}"
        )));
    }
    let plane = h * w;
    let start = (key_index - radius) * plane;
    let data = volume.data()[start..start + (2 * radius + 1) * plane].to_vec();
    SliceStack::new(Tensor::new(&[2 * radius + 1, 1, h, w], data)?, radius)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_is_flat_in_core_and_zero_outside() {
        let l = Lesion { cx: 0.0, cy: 0.0, cz: 0.0, rx: 5.0, ry: 5.0, rz: 2.0, contrast: 1.0 };
        assert_eq!(l.profile(0.0, 0.0, 0.0), 1.0);
        assert_eq!(l.profile(2.9, 0.0, 0.0), 1.0);
        assert_eq!(l.profile(5.0, 0.0, 0.0), 0.0);
        let mid = l.profile(4.0, 0.0, 0.0);
        assert!((mid - 0.5).abs() < 1e-12, "{mid}");
    }

    #[test]
    fn volumes_stay_in_unit_range() {
        let (v, lesions) = generate_volume(&SynthConfig::default(), 11);
        assert!(v.data().iter().all(|x| (0.0..=1.0).contains(x)));
        assert!((1..=3).contains(&lesions.len()));
    }
}
