//! Small parameter bundles shared by the model modules.

use satr_autodiff::{Tape, Var};

use crate::error::Result;
use crate::params::{Binder, Init, ParamId, ParamStore};

/// Convolution weight + bias. The weight shape decides 2D vs 3D use.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvParams {
    /// He-normal weights (fan-in scaled), zero bias.
    pub fn new(store: &mut ParamStore, prefix: &str, shape: &[usize], gain: f64, seed: u64) -> Self {
        let fan_in: usize = shape[1..].iter().product();
        let std = (gain / fan_in as f64).sqrt();
        let weight = store.init(&format!("{prefix}.weight"), shape, Init::Normal { std }, seed);
        let bias = store.init(&format!("{prefix}.bias"), &[shape[0]], Init::Zeros, seed);
        ConvParams { weight, bias }
    }

    pub fn conv2d(&self, tape: &mut Tape, binder: &mut Binder, x: Var, stride: usize, padding: usize) -> Result<Var> {
        let w = binder.var(tape, self.weight);
        let b = binder.var(tape, self.bias);
        Ok(tape.conv2d(x, w, b, stride, padding)?)
    }

    pub fn conv3d(&self, tape: &mut Tape, binder: &mut Binder, x: Var, stride: [usize; 3]) -> Result<Var> {
        let w = binder.var(tape, self.weight);
        let b = binder.var(tape, self.bias);
        Ok(tape.conv3d(x, w, b, stride)?)
    }
}

/// Affine map `x · W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, gain: f64, seed: u64) -> Self {
        let std = (gain / fan_in as f64).sqrt();
        let weight = store.init(&format!("{prefix}.weight"), &[fan_in, fan_out], Init::Normal { std }, seed);
        let bias = store.init(&format!("{prefix}.bias"), &[fan_out], Init::Zeros, seed);
        Linear { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        let w = binder.var(tape, self.weight);
        let b = binder.var(tape, self.bias);
        Ok(tape.linear(x, w, b)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize, seed: u64) -> Self {
        let gamma = store.init(&format!("{prefix}.gamma"), &[width], Init::Constant(1.0), seed);
        let beta = store.init(&format!("{prefix}.beta"), &[width], Init::Zeros, seed);
        LayerNormParams { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var, eps: f64) -> Result<Var> {
        let g = binder.var(tape, self.gamma);
        let b = binder.var(tape, self.beta);
        Ok(tape.layer_norm(x, g, b, eps)?)
    }
}
