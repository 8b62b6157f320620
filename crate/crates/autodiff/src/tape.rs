//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation evaluates eagerly and appends one node holding its
//! output value plus whatever it needs for the backward pass. Inputs always
//! precede the node that consumes them, so a single reverse sweep visits
//! each node exactly once.

use crate::error::{Result, TensorError};
use crate::kernels::{self, Conv2dGeom, Conv3dGeom, PatchGeom};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    AddBias { x: Var, bias: Var, width: usize },
    Relu { x: Var },
    Gelu { x: Var },
    Sigmoid { x: Var },
    Abs { x: Var },
    Softmax { x: Var, width: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, width: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Var, geom: Conv2dGeom, out_ch: usize },
    Conv3d { x: Var, w: Var, b: Var, geom: Conv3dGeom, out_ch: usize },
    BinPool { x: Var, c: usize, h: usize, w: usize, rows: Vec<(usize, usize)>, cols: Vec<(usize, usize)> },
    Bilinear { x: Var, c: usize, h: usize, w: usize, ty: Vec<(usize, usize, f64)>, tx: Vec<(usize, usize, f64)> },
    Gather { x: Var, map: Vec<usize> },
    Patches { x: Var, geom: PatchGeom },
    Concat { xs: Vec<Var>, sizes: Vec<usize>, outer: usize, inner: usize },
    Narrow { x: Var, outer: usize, inner: usize, axis_len: usize, start: usize, len: usize },
    Reshape { x: Var },
    Sum { x: Var },
    BceWithLogits { logits: Var, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations for one forward pass and differentiates them.
///
/// A tape is confined to one model instance and one thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `t` as a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Records `t` as a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Gradient of the last [`Tape::backward`] target with respect to leaf `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, shape: &[usize], data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires = inputs.iter().any(|&v| self.needs_grad(v));
        let value = Tensor::new(shape, data).expect("op produced consistent shape").with_requires_grad(requires);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(TensorError::dim(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// `[n, p] × [p, q] → [n, q]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::dim("matmul", format!("{:?} × {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        Ok(self.push(&[m, n], out, Op::Matmul { a, b, m, k, n }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "transpose")?;
        let src = self.data(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        Ok(self.push(&[cols, rows], out, Op::Transpose { x, rows, cols }, &[x]))
    }

    /// `x · w + b` for `x: [n, p]`, `w: [p, q]`, `b: [q]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(&shape, out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(&shape, out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(&shape, out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.data(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(&shape, out, Op::Scale { x, factor }, &[x])
    }

    /// Adds `bias: [d]` to every row of `x: [..., d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let width = *self.shape(x).last().unwrap_or(&1);
        if self.shape(bias) != [width] {
            return Err(TensorError::dim("add_bias", format!("bias {:?} for input {:?}", self.shape(bias), self.shape(x))));
        }
        let b = self.data(bias);
        let out = self.data(x).chunks(width).flat_map(|row| row.iter().zip(b).map(|(v, b)| v + b)).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(&shape, out, Op::AddBias { x, bias, width }, &[x, bias]))
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(&shape, out, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.max(0.0), Op::Relu { x })
    }

    /// Exact `x·Φ(x)` with the Gaussian CDF computed through `erf`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map_unary(x, kernels::gelu, Op::Gelu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, kernels::sigmoid, Op::Sigmoid { x })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map_unary(x, f64::abs, Op::Abs { x })
    }

    // ── normalisation ───────────────────────────────────────────────────

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let width = match self.shape(x).last() {
            Some(&w) => w,
            None => return Err(TensorError::dim("softmax_lastdim", "scalar input")),
        };
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(&shape, out, Op::Softmax { x, width }, &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Usage(format!("layer_norm eps must be positive, got {eps}")));
        }
        let width = *self.shape(x).last().unwrap_or(&1);
        if self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return Err(TensorError::dim(
                "layer_norm",
                format!("gamma {:?} beta {:?} for input {:?}", self.shape(gamma), self.shape(beta), self.shape(x)),
            ));
        }
        let rows = self.value(x).numel() / width;
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = Vec::with_capacity(rows * width);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * width);
        for row in self.data(x).chunks(width) {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let n = (v - mean) * r;
                xhat.push(n);
                out.push(n * g[j] + b[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(&shape, out, Op::LayerNorm { x, gamma, beta, width, xhat, rstd }, &[x, gamma, beta]))
    }

    // ── convolution and resampling ──────────────────────────────────────

    /// Cross-correlation of `x: [C, H, W]` with `w: [O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (c, h, wd) = match self.shape(x) {
            &[c, h, w] => (c, h, w),
            s => return Err(TensorError::dim("conv2d", format!("input must be [C,H,W], got {s:?}"))),
        };
        let (o, kh, kw) = match self.shape(w) {
            &[o, ci, kh, kw] if ci == c => (o, kh, kw),
            s => return Err(TensorError::dim("conv2d", format!("weight {s:?} for input {:?}", self.shape(x)))),
        };
        if self.shape(b) != [o] {
            return Err(TensorError::dim("conv2d", format!("bias {:?} for {o} output channels", self.shape(b))));
        }
        let (ho, wo) = match (
            kernels::conv_out_len(h, kh, stride, padding),
            kernels::conv_out_len(wd, kw, stride, padding),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(TensorError::dim(
                    "conv2d",
                    format!("empty output for input {h}x{wd}, kernel {kh}x{kw}, stride {stride}, padding {padding}"),
                ))
            }
        };
        let geom = Conv2dGeom { c, h, w: wd, kh, kw, stride, pad: padding, ho, wo };
        let npos = ho * wo;
        let mut out = vec![0.0; o * npos];
        let kk = c * kh * kw;
        if geom.is_pointwise() {
            kernels::gemm(o, kk, npos, self.data(w), false, self.data(x), false, &mut out, false);
        } else {
            let mut col = vec![0.0; kk * npos];
            kernels::im2col2d(self.data(x), &geom, &mut col);
            kernels::gemm(o, kk, npos, self.data(w), false, &col, false, &mut out, false);
        }
        add_channel_bias(&mut out, self.data(b), npos);
        Ok(self.push(&[o, ho, wo], out, Op::Conv2d { x, w, b, geom, out_ch: o }, &[x, w, b]))
    }

    /// Cross-correlation of `x: [C, D, H, W]` with `w: [O, C, kd, kh, kw]`,
    /// stride given per axis, no padding.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: [usize; 3]) -> Result<Var> {
        let (c, d, h, wd) = match self.shape(x) {
            &[c, d, h, w] => (c, d, h, w),
            s => return Err(TensorError::dim("conv3d", format!("input must be [C,D,H,W], got {s:?}"))),
        };
        let (o, kd, kh, kw) = match self.shape(w) {
            &[o, ci, kd, kh, kw] if ci == c => (o, kd, kh, kw),
            s => return Err(TensorError::dim("conv3d", format!("weight {s:?} for input {:?}", self.shape(x)))),
        };
        if self.shape(b) != [o] {
            return Err(TensorError::dim("conv3d", format!("bias {:?} for {o} output channels", self.shape(b))));
        }
        let dims = (
            kernels::conv_out_len(d, kd, stride[0], 0),
            kernels::conv_out_len(h, kh, stride[1], 0),
            kernels::conv_out_len(wd, kw, stride[2], 0),
        );
        let (dout, ho, wo) = match dims {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(TensorError::dim(
                    "conv3d",
                    format!("empty output for input {d}x{h}x{wd}, kernel {kd}x{kh}x{kw}, stride {stride:?}"),
                ))
            }
        };
        let geom = Conv3dGeom { c, d, h, w: wd, kd, kh, kw, stride, dout, ho, wo };
        let npos = dout * ho * wo;
        let kk = c * kd * kh * kw;
        let mut col = vec![0.0; kk * npos];
        kernels::im2col3d(self.data(x), &geom, &mut col);
        let mut out = vec![0.0; o * npos];
        kernels::gemm(o, kk, npos, self.data(w), false, &col, false, &mut out, false);
        add_channel_bias(&mut out, self.data(b), npos);
        Ok(self.push(&[o, dout, ho, wo], out, Op::Conv3d { x, w, b, geom, out_ch: o }, &[x, w, b]))
    }

    fn chw(&self, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape(x) {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(TensorError::dim(op, format!("input must be [C,H,W], got {s:?}"))),
        }
    }

    /// Adaptive average pooling; requires `out_h ≤ H` and `out_w ≤ W`.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (_, h, w) = self.chw(x, "adaptive_avg_pool2d")?;
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(TensorError::dim(
                "adaptive_avg_pool2d",
                format!("output {out_h}x{out_w} from input {h}x{w}"),
            ));
        }
        self.grid_pool2d(x, out_h, out_w)
    }

    /// Bin-mean pooling onto an `out_h × out_w` grid with the same bin edges
    /// as [`Tape::adaptive_avg_pool2d`]; grids finer than the input replicate
    /// the covering cell.
    pub fn grid_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.chw(x, "grid_pool2d")?;
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::dim("grid_pool2d", "empty output grid"));
        }
        let rows = kernels::bins(h, out_h);
        let cols = kernels::bins(w, out_w);
        let mut out = vec![0.0; c * out_h * out_w];
        kernels::bin_pool_forward(self.data(x), c, h, w, &rows, &cols, &mut out);
        Ok(self.push(&[c, out_h, out_w], out, Op::BinPool { x, c, h, w, rows, cols }, &[x]))
    }

    /// Align-corners bilinear interpolation of `x: [C, h, w]`.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.chw(x, "bilinear_resize")?;
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::dim("bilinear_resize", "empty output size"));
        }
        let ty = kernels::linear_taps(h, out_h);
        let tx = kernels::linear_taps(w, out_w);
        let mut out = vec![0.0; c * out_h * out_w];
        kernels::bilinear_forward(self.data(x), c, h, w, &ty, &tx, &mut out);
        Ok(self.push(&[c, out_h, out_w], out, Op::Bilinear { x, c, h, w, ty, tx }, &[x]))
    }

    /// Nearest-neighbour resize of `x: [C, h, w]` (source `floor(i·h/out_h)`).
    pub fn upsample_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.chw(x, "upsample_nearest")?;
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::dim("upsample_nearest", "empty output size"));
        }
        let ty = kernels::nearest_taps(h, out_h);
        let tx = kernels::nearest_taps(w, out_w);
        let mut map = Vec::with_capacity(c * out_h * out_w);
        for ci in 0..c {
            for &y in &ty {
                for &xx in &tx {
                    map.push((ci * h + y) * w + xx);
                }
            }
        }
        Ok(self.gather(x, &[c, out_h, out_w], map))
    }

    /// Binned patch unfolding of `x: [C, D, H, W]` onto a `grid_h × grid_w`
    /// token grid, giving `[grid_h·grid_w, C·D·kh·kw]`; see [`PatchGeom`].
    pub fn binned_patches(&mut self, x: Var, grid_h: usize, grid_w: usize) -> Result<(Var, PatchGeom)> {
        let (c, d, h, w) = match self.shape(x) {
            &[c, d, h, w] => (c, d, h, w),
            s => return Err(TensorError::dim("binned_patches", format!("input must be [C,D,H,W], got {s:?}"))),
        };
        if grid_h == 0 || grid_w == 0 {
            return Err(TensorError::dim("binned_patches", "empty token grid"));
        }
        let geom = PatchGeom::new(c, d, h, w, grid_h, grid_w);
        let mut out = vec![0.0; geom.tokens() * geom.width()];
        geom.forward(self.data(x), &mut out);
        let shape = [geom.tokens(), geom.width()];
        let v = self.push(&shape, out, Op::Patches { x, geom: geom.clone() }, &[x]);
        Ok((v, geom))
    }

    // ── shape manipulation ──────────────────────────────────────────────

    fn gather(&mut self, x: Var, shape: &[usize], map: Vec<usize>) -> Var {
        let src = self.data(x);
        let out = map.iter().map(|&i| src[i]).collect();
        self.push(shape, out, Op::Gather { x, map }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::dim("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let out = self.data(x).to_vec();
        Ok(self.push(shape, out, Op::Reshape { x }, &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::dim("permute", format!("permutation {perm:?} for shape {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let map = kernels::permute_index(&shape, perm);
        Ok(self.gather(x, &out_shape, map))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = match xs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => return Err(TensorError::Usage("concat of an empty list".into())),
        };
        if axis >= first.len() {
            return Err(TensorError::dim("concat", format!("axis {axis} for shape {first:?}")));
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::dim("concat", format!("{s:?} vs {first:?} along axis {axis}")));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &len) in xs.iter().zip(&sizes) {
                out.extend_from_slice(&self.data(v)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(&shape, out, Op::Concat { xs: xs.to_vec(), sizes, outer, inner }, xs))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let mut lifted = Vec::with_capacity(xs.len());
        for &v in xs {
            let mut s = vec![1];
            s.extend_from_slice(self.shape(v));
            lifted.push(self.reshape(v, &s)?);
        }
        self.concat(&lifted, 0)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::dim("narrow", format!("axis {axis} range {start}..{} of {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(&out_shape, out, Op::Narrow { x, outer, inner, axis_len, start, len }, &[x]))
    }

    /// Index `index` of `axis`, dropping that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let y = self.narrow(x, axis, index, 1)?;
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        self.reshape(y, &shape)
    }

    // ── reductions and losses ───────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(&[], vec![s], Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Summed binary cross-entropy between `sigmoid(logits)` and soft targets.
    pub fn bce_with_logits_sum(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(TensorError::dim("bce_with_logits", format!("{:?} vs {:?}", self.shape(logits), target.shape())));
        }
        let total = self
            .data(logits)
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let op = Op::BceWithLogits { logits, target: target.data().to_vec() };
        Ok(self.push(&[], vec![total], op, &[logits]))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Propagates d`output`/d(leaf) into every leaf that requires a gradient.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].value.requires_grad() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.node_backward(i, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let g = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.set_grad(Some(g))?;
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.needs_grad(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).numel()]);
            f(slot);
        };
        let y = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Matmul { a, b, m, k, n } => {
                acc(a, &mut |ga| kernels::gemm(m, n, k, g, false, self.data(b), true, ga, true));
                acc(b, &mut |gb| kernels::gemm(k, m, n, self.data(a), true, g, false, gb, true));
            }
            &Op::Transpose { x, rows, cols } => acc(x, &mut |gx| {
                for r in 0..rows {
                    for c in 0..cols {
                        gx[r * cols + c] += g[c * rows + r];
                    }
                }
            }),
            &Op::Add { a, b } => {
                acc(a, &mut |ga| axpy(ga, g, 1.0));
                acc(b, &mut |gb| axpy(gb, g, 1.0));
            }
            &Op::Sub { a, b } => {
                acc(a, &mut |ga| axpy(ga, g, 1.0));
                acc(b, &mut |gb| axpy(gb, g, -1.0));
            }
            &Op::Mul { a, b } => {
                let (da, db) = (self.data(a), self.data(b));
                acc(a, &mut |ga| ga.iter_mut().zip(g).zip(db).for_each(|((o, g), y)| *o += g * y));
                acc(b, &mut |gb| gb.iter_mut().zip(g).zip(da).for_each(|((o, g), x)| *o += g * x));
            }
            &Op::Scale { x, factor } => acc(x, &mut |gx| axpy(gx, g, factor)),
            &Op::AddBias { x, bias, width } => {
                acc(x, &mut |gx| axpy(gx, g, 1.0));
                acc(bias, &mut |gb| {
                    for row in g.chunks(width) {
                        axpy(gb, row, 1.0);
                    }
                });
            }
            &Op::Relu { x } => {
                let xd = self.data(x);
                acc(x, &mut |gx| {
                    gx.iter_mut().zip(g).zip(xd).for_each(|((o, g), v)| {
                        if *v > 0.0 {
                            *o += g
                        }
                    })
                });
            }
            &Op::Gelu { x } => {
                let xd = self.data(x);
                acc(x, &mut |gx| gx.iter_mut().zip(g).zip(xd).for_each(|((o, g), v)| *o += g * kernels::gelu_grad(*v)));
            }
            &Op::Sigmoid { x } => {
                acc(x, &mut |gx| gx.iter_mut().zip(g).zip(y).for_each(|((o, g), s)| *o += g * s * (1.0 - s)));
            }
            &Op::Abs { x } => {
                let xd = self.data(x);
                acc(x, &mut |gx| gx.iter_mut().zip(g).zip(xd).for_each(|((o, g), v)| *o += g * sign(*v)));
            }
            &Op::Softmax { x, width } => acc(x, &mut |gx| {
                for ((go, gi), yi) in gx.chunks_mut(width).zip(g.chunks(width)).zip(y.chunks(width)) {
                    let dot: f64 = gi.iter().zip(yi).map(|(a, b)| a * b).sum();
                    for j in 0..width {
                        go[j] += yi[j] * (gi[j] - dot);
                    }
                }
            }),
            Op::LayerNorm { x, gamma, beta, width, xhat, rstd } => {
                let w = *width;
                let gam = self.data(*gamma);
                acc(*gamma, &mut |gg| {
                    for (gr, xr) in g.chunks(w).zip(xhat.chunks(w)) {
                        gg.iter_mut().zip(gr).zip(xr).for_each(|((o, g), n)| *o += g * n);
                    }
                });
                acc(*beta, &mut |gb| {
                    for gr in g.chunks(w) {
                        axpy(gb, gr, 1.0);
                    }
                });
                acc(*x, &mut |gx| {
                    let mut gn = vec![0.0; w];
                    for (((go, gr), xr), r) in gx.chunks_mut(w).zip(g.chunks(w)).zip(xhat.chunks(w)).zip(rstd) {
                        for j in 0..w {
                            gn[j] = gr[j] * gam[j];
                        }
                        let mean_g = gn.iter().sum::<f64>() / w as f64;
                        let mean_gx = gn.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                        for j in 0..w {
                            go[j] += r * (gn[j] - mean_g - xr[j] * mean_gx);
                        }
                    }
                });
            }
            &Op::Conv2d { x, w, b, geom, out_ch } => {
                let npos = geom.ho * geom.wo;
                let kk = geom.c * geom.kh * geom.kw;
                acc(b, &mut |gb| channel_sums(gb, g, npos));
                if self.needs_grad(w) {
                    let col_buf;
                    let col: &[f64] = if geom.is_pointwise() {
                        self.data(x)
                    } else {
                        let mut c = vec![0.0; kk * npos];
                        kernels::im2col2d(self.data(x), &geom, &mut c);
                        col_buf = c;
                        &col_buf
                    };
                    acc(w, &mut |gw| kernels::gemm(out_ch, npos, kk, g, false, col, true, gw, true));
                }
                acc(x, &mut |gx| {
                    if geom.is_pointwise() {
                        kernels::gemm(kk, out_ch, npos, self.data(w), true, g, false, gx, true);
                    } else {
                        let mut gcol = vec![0.0; kk * npos];
                        kernels::gemm(kk, out_ch, npos, self.data(w), true, g, false, &mut gcol, false);
                        kernels::col2im2d(&gcol, &geom, gx);
                    }
                });
            }
            &Op::Conv3d { x, w, b, geom, out_ch } => {
                let npos = geom.dout * geom.ho * geom.wo;
                let kk = geom.c * geom.kd * geom.kh * geom.kw;
                acc(b, &mut |gb| channel_sums(gb, g, npos));
                if self.needs_grad(w) {
                    let mut col = vec![0.0; kk * npos];
                    kernels::im2col3d(self.data(x), &geom, &mut col);
                    acc(w, &mut |gw| kernels::gemm(out_ch, npos, kk, g, false, &col, true, gw, true));
                }
                acc(x, &mut |gx| {
                    let mut gcol = vec![0.0; kk * npos];
                    kernels::gemm(kk, out_ch, npos, self.data(w), true, g, false, &mut gcol, false);
                    kernels::col2im3d(&gcol, &geom, gx);
                });
            }
            Op::BinPool { x, c, h, w, rows, cols } => {
                acc(*x, &mut |gx| kernels::bin_pool_backward(g, *c, *h, *w, rows, cols, gx));
            }
            Op::Bilinear { x, c, h, w, ty, tx } => {
                acc(*x, &mut |gx| kernels::bilinear_backward(g, *c, *h, *w, ty, tx, gx));
            }
            Op::Gather { x, map } => acc(*x, &mut |gx| {
                for (gv, &src) in g.iter().zip(map) {
                    gx[src] += gv;
                }
            }),
            Op::Patches { x, geom } => acc(*x, &mut |gx| geom.backward(g, gx)),
            Op::Concat { xs, sizes, outer, inner } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&v, &len) in xs.iter().zip(sizes) {
                    acc(v, &mut |gx| {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            axpy(&mut gx[o * len * inner..(o + 1) * len * inner], src, 1.0);
                        }
                    });
                    offset += len;
                }
            }
            &Op::Narrow { x, outer, inner, axis_len, start, len } => acc(x, &mut |gx| {
                for o in 0..outer {
                    let base = (o * axis_len + start) * inner;
                    axpy(&mut gx[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner], 1.0);
                }
            }),
            &Op::Reshape { x } => acc(x, &mut |gx| axpy(gx, g, 1.0)),
            &Op::Sum { x } => acc(x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::BceWithLogits { logits, target } => {
                let z = self.data(*logits);
                acc(*logits, &mut |gz| {
                    for ((o, &zi), &t) in gz.iter_mut().zip(z).zip(target) {
                        *o += g[0] * (kernels::sigmoid(zi) - t);
                    }
                });
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], npos: usize) {
    for (plane, b) in out.chunks_mut(npos).zip(bias) {
        plane.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(gb: &mut [f64], g: &[f64], npos: usize) {
    for (o, plane) in gb.iter_mut().zip(g.chunks(npos)) {
        *o += plane.iter().sum::<f64>();
    }
}
