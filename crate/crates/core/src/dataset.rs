//! Generated datasets: volumes split by id, key-slice samples, and the
//! on-disk layout (`manifest.json`, `volume_<id>.bin`, `boxes_<id>.json`).

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use satr_autodiff::{io, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::SliceStack;
use crate::detection::GroundTruthBox;
use crate::error::{CoreError, Result};
use crate::synth::{generate_volume, render_boxes, slice_window, Lesion, SynthConfig};

const DATASET_FORMAT: &str = "satr-dataset-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(CoreError::config(format!("unknown split {other:?} (expected train, val or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeRecord {
    /// Volume id; also the generator seed.
    pub id: u64,
    pub volume: Tensor,
    pub lesions: Vec<Lesion>,
    /// Ground truth for every slice of the volume.
    pub slice_boxes: Vec<Vec<GroundTruthBox>>,
}

/// One training/evaluation image: a slice window and its key-slice boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub stack: SliceStack,
    pub boxes: Vec<GroundTruthBox>,
    pub volume_id: u64,
    pub key_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub radius: usize,
    pub volumes: Vec<VolumeRecord>,
}

/// Sizes of the 70/15/15 split of `n` volumes, in volume order.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = ((n as f64) * 0.70).round() as usize;
    let val = (((n as f64) * 0.15).round() as usize).min(n - train);
    (train, val, n - train - val)
}

impl Dataset {
    pub fn generate(config: &SynthConfig, radius: usize, seeds: &[u64]) -> Result<Self> {
        config.validate(radius)?;
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(CoreError::config(format!("seed {dup} listed twice")));
        }
        let volumes = seeds
            .iter()
            .map(|&id| {
                let (volume, lesions) = generate_volume(config, id);
                let slice_boxes = (0..config.depth).map(|z| render_boxes(&lesions, z)).collect();
                VolumeRecord { id, volume, lesions, slice_boxes }
            })
            .collect();
        Ok(Dataset { config: config.clone(), radius, volumes })
    }

    pub fn split(&self) -> SplitAssignment {
        let (train, val, _) = split_sizes(self.volumes.len());
        let ids: Vec<u64> = self.volumes.iter().map(|v| v.id).collect();
        SplitAssignment {
            train: ids[..train].to_vec(),
            val: ids[train..train + val].to_vec(),
            test: ids[train + val..].to_vec(),
        }
    }

    pub fn volumes_in(&self, split: Split) -> &[VolumeRecord] {
        let (train, val, _) = split_sizes(self.volumes.len());
        match split {
            Split::Train => &self.volumes[..train],
            Split::Val => &self.volumes[train..train + val],
            Split::Test => &self.volumes[train + val..],
        }
    }

    /// Key slices per volume: every slice with a full window around it.
    pub fn keys_per_volume(&self) -> usize {
        self.config.depth - 2 * self.radius
    }

    pub fn image_count(&self) -> usize {
        self.volumes.len() * self.keys_per_volume()
    }

    /// Every key-slice sample of a split, volume order then slice order.
    pub fn samples(&self, split: Split) -> Result<Vec<SynthSample>> {
        let mut out = Vec::new();
        for v in self.volumes_in(split) {
            for key in self.radius..self.config.depth - self.radius {
                out.push(SynthSample {
                    stack: slice_window(&v.volume, key, self.radius)?,
                    boxes: v.slice_boxes[key].clone(),
                    volume_id: v.id,
                    key_index: key,
                });
            }
        }
        Ok(out)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.volumes.len());
        for v in &self.volumes {
            let volume_file = format!("volume_{}.bin", v.id);
            let boxes_file = format!("boxes_{}.json", v.id);
            let path = dir.join(&volume_file);
            fs::write(&path, io::to_bytes(&v.volume)).map_err(|e| CoreError::io(&path, e))?;
            let boxes = BoxesFile { lesions: v.lesions.clone(), slices: v.slice_boxes.clone() };
            let path = dir.join(&boxes_file);
            let text = serde_json::to_string_pretty(&boxes).expect("boxes serialise");
            fs::write(&path, text).map_err(|e| CoreError::io(&path, e))?;
            entries.push(VolumeEntry { id: v.id, volume_file, boxes_file });
        }
        let manifest = Manifest {
            format: DATASET_FORMAT.into(),
            config: self.config.clone(),
            window_radius: self.radius,
            volumes: entries,
            split: self.split(),
            image_count: self.image_count(),
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        fs::write(&path, text).map_err(|e| CoreError::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CoreError::format(&path, e))?;
        if manifest.format != DATASET_FORMAT {
            return Err(CoreError::format(&path, format!("unknown dataset format {:?}", manifest.format)));
        }
        manifest.config.validate(manifest.window_radius).map_err(|e| CoreError::format(&path, e))?;
        let cfg = &manifest.config;
        let mut volumes = Vec::with_capacity(manifest.volumes.len());
        for entry in &manifest.volumes {
            let vpath = dir.join(&entry.volume_file);
            let bytes = fs::read(&vpath).map_err(|e| CoreError::io(&vpath, e))?;
            let volume = io::from_bytes(&bytes).map_err(|e| CoreError::format(&vpath, e))?;
            if volume.shape() != [cfg.depth, cfg.height, cfg.width] {
                return Err(CoreError::format(&vpath, format!("volume has shape {:?}", volume.shape())));
            }
            let bpath = dir.join(&entry.boxes_file);
            let text = fs::read_to_string(&bpath).map_err(|e| CoreError::io(&bpath, e))?;
            let boxes: BoxesFile = serde_json::from_str(&text).map_err(|e| CoreError::format(&bpath, e))?;
            if boxes.slices.len() != cfg.depth {
                return Err(CoreError::format(&bpath, format!("{} slice box lists for depth {}", boxes.slices.len(), cfg.depth)));
            }
            volumes.push(VolumeRecord { id: entry.id, volume, lesions: boxes.lesions, slice_boxes: boxes.slices });
        }
        let ds = Dataset { config: manifest.config.clone(), radius: manifest.window_radius, volumes };
        if ds.split() != manifest.split || ds.image_count() != manifest.image_count {
            return Err(CoreError::format(&path, "split or image count disagrees with the volume list"));
        }
        Ok(ds)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeEntry {
    id: u64,
    volume_file: String,
    boxes_file: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    config: SynthConfig,
    window_radius: usize,
    volumes: Vec<VolumeEntry>,
    split: SplitAssignment,
    image_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxesFile {
    lesions: Vec<Lesion>,
    slices: Vec<Vec<GroundTruthBox>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_seventy_fifteen_fifteen() {
        assert_eq!(split_sizes(20), (14, 3, 3));
        assert_eq!(split_sizes(86), (60, 13, 13));
        assert_eq!(split_sizes(3), (2, 0, 1));
        assert_eq!(split_sizes(1), (1, 0, 0));
    }
}
