//! Named parameter storage, per-forward binding onto a tape, and the
//! checkpoint format (`manifest.json` + `weights.bin`).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use satr_autodiff::{io, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a parameter is initialised. Every parameter draws from its own RNG
/// stream keyed by (seed, name), so adding a module never perturbs the
/// initial values of the others.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Constant(f64),
    Normal { std: f64 },
}

/// Parameters in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the run seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn init(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) -> ParamId {
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Constant(c) => Tensor::full(shape, c),
            Init::Normal { std } => {
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
                let dist = Normal::new(0.0, std).expect("finite std");
                Tensor::from_fn(shape, |_| dist.sample(&mut rng))
            }
        };
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Writes `manifest.json` (name → byte offset and shape, plus `meta`)
    /// and `weights.bin` (all tensors back to back) into `dir`.
    pub fn save(&self, dir: &Path, meta: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.len());
        for (name, t) in self.names.iter().zip(&self.values) {
            entries.push(ManifestEntry { name: name.clone(), offset: blob.len() as u64, shape: t.shape().to_vec() });
            io::write_tensor(&mut blob, t)?;
        }
        let manifest = CheckpointManifest { format: CHECKPOINT_FORMAT.into(), meta, params: entries };
        let weights = dir.join(WEIGHTS_FILE);
        fs::write(&weights, &blob).map_err(|e| CoreError::io(&weights, e))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        fs::write(&path, text).map_err(|e| CoreError::io(&path, e))?;
        Ok(())
    }

    /// Reads a checkpoint written by [`ParamStore::save`].
    pub fn load(dir: &Path) -> Result<(ParamStore, serde_json::Value)> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| CoreError::format(&path, e))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(CoreError::format(&path, format!("unknown checkpoint format {:?}", manifest.format)));
        }
        let wpath = dir.join(WEIGHTS_FILE);
        let blob = fs::read(&wpath).map_err(|e| CoreError::io(&wpath, e))?;
        let mut store = ParamStore::new();
        for entry in &manifest.params {
            let start = entry.offset as usize;
            let len = io::encoded_len(&entry.shape);
            let bytes = blob
                .get(start..start + len)
                .ok_or_else(|| CoreError::format(&wpath, format!("parameter {} runs past end of file", entry.name)))?;
            let t = io::from_bytes(bytes).map_err(|e| CoreError::format(&wpath, format!("{}: {e}", entry.name)))?;
            if t.shape() != entry.shape.as_slice() {
                return Err(CoreError::format(&wpath, format!("parameter {} has shape {:?}", entry.name, t.shape())));
            }
            store.add(&entry.name, t);
        }
        Ok((store, manifest.meta))
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const CHECKPOINT_FORMAT: &str = "satr-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub offset: u64,
    pub shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format: String,
    meta: serde_json::Value,
    params: Vec<ManifestEntry>,
}

/// Lazily places parameters on a tape for one forward pass.
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Binder<'a> {
    /// `trainable` decides whether bound parameters collect gradients.
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Binder { store, vars: vec![None; store.len()], trainable }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Pre-binds `id` to an existing tape value (used to differentiate
    /// with respect to a single parameter).
    pub fn override_with(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = Some(var);
    }

    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = self.store.get(id).clone().with_requires_grad(self.trainable);
        let v = tape.leaf(t);
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients of every bound parameter after `tape.backward`.
    pub fn grads<'t>(&self, tape: &'t Tape) -> Vec<(ParamId, &'t [f64])> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| tape.grad(v)).map(|g| (ParamId(i), g)))
            .collect()
    }
}
