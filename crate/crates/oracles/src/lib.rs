//! Explicit-loop reference implementations.
//!
//! Nothing here shares code with the tape kernels: every function is a
//! direct transcription of the defining sum, written for clarity over
//! speed. Tests compare the optimised paths against these.

pub fn matmul(a: &[f64], b: &[f64], n: usize, p: usize, q: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * q];
    for i in 0..n {
        for j in 0..q {
            let mut s = 0.0;
            for k in 0..p {
                s += a[i * p + k] * b[k * q + j];
            }
            c[i * q + j] = s;
        }
    }
    c
}

pub fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(width) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / z));
    }
    out
}

pub fn layer_norm_rows(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let d = gamma.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for j in 0..d {
            out.push((row[j] - mean) / (var + eps).sqrt() * gamma[j] + beta[j]);
        }
    }
    out
}

/// Gaussian CDF by Simpson quadrature of the density on `[-40, x]`.
pub fn normal_cdf(x: f64) -> f64 {
    if x < -40.0 {
        return 0.0;
    }
    let n = 20_000usize;
    let a = -40.0;
    let h = (x - a) / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(a) + pdf(x);
    for i in 1..n {
        let t = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(t);
    }
    s * h / 3.0
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// `x: [c, h, w]`, `w: [o, c, kh, kw]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let o = bias.len();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; o * ho * wo];
    for oc in 0..o {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = bias[oc];
                for ic in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                s += weight[((oc * c + ic) * kh + ky) * kw + kx]
                                    * x[(ic * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
                out[(oc * ho + oy) * wo + ox] = s;
            }
        }
    }
    (out, ho, wo)
}

/// `x: [c, d, h, w]`, `w: [o, c, kd, kh, kw]`, no padding.
#[allow(clippy::too_many_arguments)]
pub fn conv3d(
    x: &[f64],
    dims: [usize; 4],
    weight: &[f64],
    bias: &[f64],
    kernel: [usize; 3],
    stride: [usize; 3],
) -> (Vec<f64>, [usize; 3]) {
    let [c, d, h, w] = dims;
    let [kd, kh, kw] = kernel;
    let o = bias.len();
    let od = (d - kd) / stride[0] + 1;
    let oh = (h - kh) / stride[1] + 1;
    let ow = (w - kw) / stride[2] + 1;
    let mut out = vec![0.0; o * od * oh * ow];
    for oc in 0..o {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = bias[oc];
                    for ic in 0..c {
                        for a in 0..kd {
                            for b in 0..kh {
                                for e in 0..kw {
                                    let iz = z * stride[0] + a;
                                    let iy = y * stride[1] + b;
                                    let ix = xx * stride[2] + e;
                                    s += weight[(((oc * c + ic) * kd + a) * kh + b) * kw + e]
                                        * x[((ic * d + iz) * h + iy) * w + ix];
                                }
                            }
                        }
                    }
                    out[((oc * od + z) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    (out, [od, oh, ow])
}

/// Adaptive average pooling by enumerating each bin's cells. Bin `i`
/// covers `[floor(i·H/out), floor((i+1)·H/out))`.
pub fn adaptive_avg_pool2d(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let (r0, r1) = (i * h / oh, (i + 1) * h / oh);
                let (c0, c1) = (j * w / ow, (j + 1) * w / ow);
                let mut cells = Vec::new();
                for y in r0..r1 {
                    for xx in c0..c1 {
                        cells.push(x[(ci * h + y) * w + xx]);
                    }
                }
                out.push(cells.iter().sum::<f64>() / cells.len() as f64);
            }
        }
    }
    out
}

/// Grid pooling: adaptive bins when the grid is no finer than the input;
/// otherwise each output cell copies the input cell it falls in.
pub fn grid_pool2d(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let span = |i: usize, n: usize, o: usize| {
        let start = i * n / o;
        (start, ((i + 1) * n / o).max(start + 1))
    };
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let (r0, r1) = span(i, h, oh);
                let (c0, c1) = span(j, w, ow);
                let mut total = 0.0;
                for y in r0..r1 {
                    for xx in c0..c1 {
                        total += x[(ci * h + y) * w + xx];
                    }
                }
                out.push(total / ((r1 - r0) * (c1 - c0)) as f64);
            }
        }
    }
    out
}

/// Fixed average pooling with window `r` and stride `r`.
pub fn avg_pool_fixed(x: &[f64], c: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let (oh, ow) = (h / r, w / r);
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut s = 0.0;
                for a in 0..r {
                    for b in 0..r {
                        s += x[(ci * h + i * r + a) * w + j * r + b];
                    }
                }
                out[(ci * oh + i) * ow + j] = s / (r * r) as f64;
            }
        }
    }
    out
}

/// Align-corners bilinear interpolation evaluated point by point.
pub fn bilinear_align_corners(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |i: usize, n_in: usize, n_out: usize| -> f64 {
        if n_out == 1 {
            0.0
        } else {
            i as f64 * (n_in as f64 - 1.0) / (n_out as f64 - 1.0)
        }
    };
    let at = |ci: usize, y: usize, xx: usize| x[(ci * h + y.min(h - 1)) * w + xx.min(w - 1)];
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let sy = coord(i, h, oh);
                let sx = coord(j, w, ow);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let v = at(ci, y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + at(ci, y0, x0 + 1) * (1.0 - fy) * fx
                    + at(ci, y0 + 1, x0) * fy * (1.0 - fx)
                    + at(ci, y0 + 1, x0 + 1) * fy * fx;
                out.push(v);
            }
        }
    }
    out
}

/// Single-query-set scaled dot-product attention for one head.
/// `q: [t, d]`, `k: [t, d]`, `v: [t, d]`; returns (output, weights).
pub fn attention_head(q: &[f64], k: &[f64], v: &[f64], t: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (d as f64).sqrt();
    let mut weights = vec![0.0; t * t];
    for i in 0..t {
        let mut logits = vec![0.0; t];
        for j in 0..t {
            let mut s = 0.0;
            for e in 0..d {
                s += q[i * d + e] * k[j * d + e];
            }
            logits[j] = s * scale;
        }
        let row = softmax_rows(&logits, t);
        weights[i * t..(i + 1) * t].copy_from_slice(&row);
    }
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        for e in 0..d {
            let mut s = 0.0;
            for j in 0..t {
                s += weights[i * t + j] * v[j * d + e];
            }
            out[i * d + e] = s;
        }
    }
    (out, weights)
}
