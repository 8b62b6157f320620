//! Raw compute kernels on flat row-major buffers. Shapes are validated by
//! the tape before any of these run.

/// `c (+)= op(a) · op(b)` with `op(a)` of shape `[m, k]` and `op(b)` of
/// shape `[k, n]`. A transposed operand is stored in its untransposed
/// layout (`[k, m]` for `a`, `[n, k]` for `b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths were checked against m, k, n above and the
    // strides describe in-bounds row-major layouts of those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output extent of a convolution along one axis, `None` if empty.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2dGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Conv2dGeom {
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `x: [c, h, w]` into `[c·kh·kw, ho·wo]`.
pub fn im2col2d(x: &[f64], g: &Conv2dGeom, col: &mut [f64]) {
    let npos = g.ho * g.wo;
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * npos..(row + 1) * npos];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col2d`]: scatters columns back into `gx`, accumulating.
pub fn col2im2d(col: &[f64], g: &Conv2dGeom, gx: &mut [f64]) {
    let npos = g.ho * g.wo;
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * npos..(row + 1) * npos];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut gx[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv3dGeom {
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub kd: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: [usize; 3],
    pub dout: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Conv3dGeom {
    /// Calls `f(col_index, x_index)` for every tap of the unfolded matrix.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let npos = self.dout * self.ho * self.wo;
        for ci in 0..self.c {
            for kz in 0..self.kd {
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let row = ((ci * self.kd + kz) * self.kh + ky) * self.kw + kx;
                        for oz in 0..self.dout {
                            let iz = oz * self.stride[0] + kz;
                            for oy in 0..self.ho {
                                let iy = oy * self.stride[1] + ky;
                                let base = ((ci * self.d + iz) * self.h + iy) * self.w;
                                for ox in 0..self.wo {
                                    let ix = ox * self.stride[2] + kx;
                                    let pos = (oz * self.ho + oy) * self.wo + ox;
                                    f(row * npos + pos, base + ix);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds `x: [c, d, h, w]` into `[c·kd·kh·kw, dout·ho·wo]` (no padding).
pub fn im2col3d(x: &[f64], g: &Conv3dGeom, col: &mut [f64]) {
    g.for_each_tap(|dst, src| col[dst] = x[src]);
}

pub fn col2im3d(col: &[f64], g: &Conv3dGeom, gx: &mut [f64]) {
    g.for_each_tap(|src, dst| gx[dst] += col[src]);
}

/// Pooling bins `[start, end)` mapping `input` cells onto `output` cells.
///
/// `start = floor(i·in/out)`, `end = floor((i+1)·in/out)`; when `out > in`
/// the bin is widened to one cell so every output cell has a source.
pub fn bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| {
            let start = i * input / output;
            let end = ((i + 1) * input / output).max(start + 1);
            (start, end)
        })
        .collect()
}

pub fn bin_pool_forward(x: &[f64], c: usize, h: usize, w: usize, rows: &[(usize, usize)], cols: &[(usize, usize)], out: &mut [f64]) {
    let (oh, ow) = (rows.len(), cols.len());
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for (i, &(r0, r1)) in rows.iter().enumerate() {
            for (j, &(c0, c1)) in cols.iter().enumerate() {
                let mut acc = 0.0;
                for y in r0..r1 {
                    for v in &plane[y * w + c0..y * w + c1] {
                        acc += v;
                    }
                }
                out[(ci * oh + i) * ow + j] = acc / ((r1 - r0) * (c1 - c0)) as f64;
            }
        }
    }
}

pub fn bin_pool_backward(g: &[f64], c: usize, h: usize, w: usize, rows: &[(usize, usize)], cols: &[(usize, usize)], gx: &mut [f64]) {
    let (oh, ow) = (rows.len(), cols.len());
    for ci in 0..c {
        let plane = &mut gx[ci * h * w..(ci + 1) * h * w];
        for (i, &(r0, r1)) in rows.iter().enumerate() {
            for (j, &(c0, c1)) in cols.iter().enumerate() {
                let share = g[(ci * oh + i) * ow + j] / ((r1 - r0) * (c1 - c0)) as f64;
                for y in r0..r1 {
                    for v in &mut plane[y * w + c0..y * w + c1] {
                        *v += share;
                    }
                }
            }
        }
    }
}

/// Align-corners source taps along one axis: `(i0, i1, frac)`.
pub fn linear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|i| {
            if input == 1 || output == 1 {
                return (0, 0, 0.0);
            }
            let src = i as f64 * (input - 1) as f64 / (output - 1) as f64;
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn bilinear_forward(x: &[f64], c: usize, h: usize, w: usize, ty: &[(usize, usize, f64)], tx: &[(usize, usize, f64)], out: &mut [f64]) {
    let (oh, ow) = (ty.len(), tx.len());
    for ci in 0..c {
        let p = &x[ci * h * w..(ci + 1) * h * w];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out[(ci * oh + i) * ow + j] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
}

pub fn bilinear_backward(g: &[f64], c: usize, h: usize, w: usize, ty: &[(usize, usize, f64)], tx: &[(usize, usize, f64)], gx: &mut [f64]) {
    let (oh, ow) = (ty.len(), tx.len());
    for ci in 0..c {
        let p = &mut gx[ci * h * w..(ci + 1) * h * w];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let gv = g[(ci * oh + i) * ow + j];
                p[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                p[y0 * w + x1] += gv * (1.0 - fy) * fx;
                p[y1 * w + x0] += gv * fy * (1.0 - fx);
                p[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
}

/// Nearest-neighbour source index along one axis: `floor(i·in/out)`.
pub fn nearest_taps(input: usize, output: usize) -> Vec<usize> {
    (0..output).map(|i| i * input / output).collect()
}

/// Binned patch extraction over `x: [c, d, h, w]`.
///
/// Token `(i, j)` of a `rows.len() × cols.len()` grid reads the spatial bin
/// `rows[i] × cols[j]` of every channel and depth plane; the result is
/// `[tokens, c·d·kh·kw]` with `kh, kw` the largest bin extents. Taps past a
/// shorter bin's extent are zero.
#[derive(Clone, Debug)]
pub struct PatchGeom {
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub rows: Vec<(usize, usize)>,
    pub cols: Vec<(usize, usize)>,
    pub kh: usize,
    pub kw: usize,
}

impl PatchGeom {
    pub fn new(c: usize, d: usize, h: usize, w: usize, grid_h: usize, grid_w: usize) -> Self {
        let rows = bins(h, grid_h);
        let cols = bins(w, grid_w);
        let kh = rows.iter().map(|(a, b)| b - a).max().unwrap_or(1);
        let kw = cols.iter().map(|(a, b)| b - a).max().unwrap_or(1);
        PatchGeom { c, d, h, w, rows, cols, kh, kw }
    }

    pub fn tokens(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn width(&self) -> usize {
        self.c * self.d * self.kh * self.kw
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let width = self.width();
        for (i, &(r0, r1)) in self.rows.iter().enumerate() {
            for (j, &(c0, c1)) in self.cols.iter().enumerate() {
                let t = i * self.cols.len() + j;
                for ci in 0..self.c {
                    for z in 0..self.d {
                        for ky in 0..(r1 - r0) {
                            for kx in 0..(c1 - c0) {
                                let col = ((ci * self.d + z) * self.kh + ky) * self.kw + kx;
                                let src = ((ci * self.d + z) * self.h + r0 + ky) * self.w + c0 + kx;
                                f(t * width + col, src);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        self.for_each(|dst, src| out[dst] = x[src]);
    }

    pub fn backward(&self, g: &[f64], gx: &mut [f64]) {
        self.for_each(|src, dst| gx[dst] += g[src]);
    }
}

/// Row-major strides of `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output flat index of `x.permute(perm)`, the flat input index.
pub fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; perm.len()];
    let mut map = Vec::with_capacity(total);
    for _ in 0..total {
        map.push(idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum());
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_tile_the_input_when_downsampling() {
        for input in 1..20 {
            for output in 1..=input {
                let b = bins(input, output);
                assert_eq!(b[0].0, 0);
                assert_eq!(b[output - 1].1, input);
                for w in b.windows(2) {
                    assert_eq!(w[0].1, w[1].0);
                }
            }
        }
    }

    #[test]
    fn bins_replicate_when_upsampling() {
        assert_eq!(bins(2, 4), vec![(0, 1), (0, 1), (1, 2), (1, 2)]);
        assert_eq!(bins(8, 16).len(), 16);
        assert!(bins(3, 16).iter().all(|&(a, b)| b == a + 1 && b <= 3));
    }

    #[test]
    fn divisible_bins_are_fixed_windows() {
        assert_eq!(bins(32, 16), (0..16).map(|i| (2 * i, 2 * i + 2)).collect::<Vec<_>>());
    }

    #[test]
    fn conv_out_len_matches_formula() {
        assert_eq!(conv_out_len(64, 3, 2, 1), Some(32));
        assert_eq!(conv_out_len(5, 3, 1, 1), Some(5));
        assert_eq!(conv_out_len(2, 3, 1, 0), None);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }
}
