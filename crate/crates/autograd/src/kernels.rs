//! Numerical kernels behind the graph operations.
//!
//! Depth tensors use the layout `[batch, channels, depth, positions]`: the
//! depth axis is convolved and pooled while every position is processed
//! independently with an identical sequence of floating-point operations.
//! Image tensors use `[batch, channels, height, width]`.

/// Output length of a strided axis with ceil rounding.
pub fn strided_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Leading zero padding for a "same" strided convolution.
pub fn same_pad(len_in: usize, len_out: usize, kernel: usize, stride: usize) -> usize {
    let total = ((len_out - 1) * stride + kernel).saturating_sub(len_in);
    total / 2
}

#[derive(Clone, Copy, Debug)]
pub struct DepthConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub positions: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl DepthConvGeom {
    #[inline]
    fn src(&self, d_out: usize, k: usize) -> Option<usize> {
        let s = (d_out * self.stride + k) as isize - self.pad as isize;
        (s >= 0 && (s as usize) < self.d_in).then_some(s as usize)
    }
}

pub fn depth_conv_forward(x: &[f64], w: &[f64], bias: &[f64], g: &DepthConvGeom) -> Vec<f64> {
    let p = g.positions;
    let mut out = vec![0.0; g.batch * g.c_out * g.d_out * p];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let ob = ((b * g.c_out + co) * g.d_out) * p;
            let block = &mut out[ob..ob + g.d_out * p];
            block.iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..g.c_in {
                let xb = ((b * g.c_in + ci) * g.d_in) * p;
                for k in 0..g.kernel {
                    let wv = w[(co * g.c_in + ci) * g.kernel + k];
                    for d in 0..g.d_out {
                        if let Some(s) = g.src(d, k) {
                            let xr = &x[xb + s * p..xb + (s + 1) * p];
                            let or = &mut block[d * p..(d + 1) * p];
                            for (o, xv) in or.iter_mut().zip(xr) {
                                *o += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (dx, dw, dbias).
pub fn depth_conv_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &DepthConvGeom,
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let p = g.positions;
    let mut dw = vec![0.0; g.c_out * g.c_in * g.kernel];
    let mut db = vec![0.0; g.c_out];
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let yb = ((b * g.c_out + co) * g.d_out) * p;
            let dyb = &dy[yb..yb + g.d_out * p];
            db[co] += dyb.iter().sum::<f64>();
            for ci in 0..g.c_in {
                let xb = ((b * g.c_in + ci) * g.d_in) * p;
                for k in 0..g.kernel {
                    let widx = (co * g.c_in + ci) * g.kernel + k;
                    let wv = w[widx];
                    let mut acc = 0.0;
                    for d in 0..g.d_out {
                        if let Some(s) = g.src(d, k) {
                            let dr = &dyb[d * p..(d + 1) * p];
                            let xr = &x[xb + s * p..xb + (s + 1) * p];
                            acc += dr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                            if let Some(dx) = dx.as_mut() {
                                let dxr = &mut dx[xb + s * p..xb + (s + 1) * p];
                                for (o, v) in dxr.iter_mut().zip(dr) {
                                    *o += wv * v;
                                }
                            }
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    (dx, dw, db)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// Window-2 stride-2 ceil-mode pooling along depth. Returns output and, for
/// max pooling, the chosen offset (0 or 1) per output element.
pub fn depth_pool_forward(
    x: &[f64],
    rows: usize,
    d_in: usize,
    p: usize,
    kind: PoolKind,
) -> (Vec<f64>, Vec<u8>) {
    let d_out = strided_len(d_in, 2);
    let mut out = vec![0.0; rows * d_out * p];
    let mut arg = if kind == PoolKind::Max {
        vec![0u8; out.len()]
    } else {
        Vec::new()
    };
    for r in 0..rows {
        for d in 0..d_out {
            let s0 = (r * d_in + 2 * d) * p;
            let has_pair = 2 * d + 1 < d_in;
            let o = (r * d_out + d) * p;
            for q in 0..p {
                let a = x[s0 + q];
                out[o + q] = if has_pair {
                    let b = x[s0 + p + q];
                    match kind {
                        PoolKind::Avg => 0.5 * (a + b),
                        PoolKind::Max => {
                            if b > a {
                                arg[o + q] = 1;
                                b
                            } else {
                                a
                            }
                        }
                    }
                } else {
                    a
                };
            }
        }
    }
    (out, arg)
}

pub fn depth_pool_backward(
    dy: &[f64],
    rows: usize,
    d_in: usize,
    p: usize,
    kind: PoolKind,
    arg: &[u8],
) -> Vec<f64> {
    let d_out = strided_len(d_in, 2);
    let mut dx = vec![0.0; rows * d_in * p];
    for r in 0..rows {
        for d in 0..d_out {
            let s0 = (r * d_in + 2 * d) * p;
            let has_pair = 2 * d + 1 < d_in;
            let o = (r * d_out + d) * p;
            for q in 0..p {
                let gv = dy[o + q];
                if !has_pair {
                    dx[s0 + q] += gv;
                    continue;
                }
                match kind {
                    PoolKind::Avg => {
                        dx[s0 + q] += 0.5 * gv;
                        dx[s0 + p + q] += 0.5 * gv;
                    }
                    PoolKind::Max => {
                        dx[s0 + arg[o + q] as usize * p + q] += gv;
                    }
                }
            }
        }
    }
    dx
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

fn im2col(x: &[f64], g: &Conv2dGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    for ci in 0..g.c_in {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy as usize >= g.h {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let xr = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix as usize >= g.w {
                            0.0
                        } else {
                            xr[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Conv2dGeom, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    for ci in 0..g.c_in {
        let xc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            xc[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// C = alpha * A(m x k) * B(k x n) + beta * C with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    // SAFETY: slices are sized by the callers for the given dimensions and
    // strides; C is row-major m x n and does not alias A or B.
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

pub fn conv2d_forward(x: &[f64], w: &[f64], bias: &[f64], g: &Conv2dGeom) -> Vec<f64> {
    let hw = g.out_h() * g.out_w();
    let ck = g.patch();
    let mut out = vec![0.0; g.batch * g.c_out * hw];
    let mut cols = vec![0.0; ck * hw];
    for b in 0..g.batch {
        im2col(&x[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w], g, &mut cols);
        let ob = &mut out[b * g.c_out * hw..(b + 1) * g.c_out * hw];
        for co in 0..g.c_out {
            ob[co * hw..(co + 1) * hw]
                .iter_mut()
                .for_each(|v| *v = bias[co]);
        }
        gemm(
            g.c_out, ck, hw, w, ck as isize, 1, &cols, hw as isize, 1, 1.0, ob,
        );
    }
    out
}

pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &Conv2dGeom,
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let hw = g.out_h() * g.out_w();
    let ck = g.patch();
    let in_len = g.c_in * g.h * g.w;
    let mut dw = vec![0.0; g.c_out * ck];
    let mut db = vec![0.0; g.c_out];
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut cols = vec![0.0; ck * hw];
    let mut dcols = vec![0.0; ck * hw];
    for b in 0..g.batch {
        let dyb = &dy[b * g.c_out * hw..(b + 1) * g.c_out * hw];
        for co in 0..g.c_out {
            db[co] += dyb[co * hw..(co + 1) * hw].iter().sum::<f64>();
        }
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
        // dw += dy_b (c_out x hw) * cols^T (hw x ck)
        gemm(
            g.c_out, hw, ck, dyb, hw as isize, 1, &cols, 1, hw as isize, 1.0, &mut dw,
        );
        if let Some(dx) = dx.as_mut() {
            // dcols = w^T (ck x c_out) * dy_b (c_out x hw)
            gemm(
                ck, g.c_out, hw, w, 1, ck as isize, dyb, hw as isize, 1, 0.0, &mut dcols,
            );
            col2im(&dcols, g, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    (dx, dw, db)
}

/// Batch-normalization statistics over every axis except the channel axis.
/// `x` is `[batch, channels, inner]`. Returns per-channel (mean, biased var).
pub fn channel_stats(x: &[f64], batch: usize, channels: usize, inner: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (batch * inner) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let mut s = 0.0;
        for b in 0..batch {
            let o = (b * channels + c) * inner;
            s += x[o..o + inner].iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for b in 0..batch {
            let o = (b * channels + c) * inner;
            v += x[o..o + inner].iter().map(|t| (t - m) * (t - m)).sum::<f64>();
        }
        mean[c] = m;
        var[c] = v / count;
    }
    (mean, var)
}

/// A fixed linear resampling operator: each output pixel is a weighted sum of
/// at most four input pixels of the same channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ResampleMap {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub taps: Vec<[(u32, f64); 4]>,
}

impl ResampleMap {
    pub fn identity(h: usize, w: usize) -> Self {
        let taps = (0..h * w)
            .map(|i| [(i as u32, 1.0), (0, 0.0), (0, 0.0), (0, 0.0)])
            .collect();
        ResampleMap {
            in_h: h,
            in_w: w,
            out_h: h,
            out_w: w,
            taps,
        }
    }

    pub fn apply(&self, src: &[f64], dst: &mut [f64]) {
        for (d, taps) in dst.iter_mut().zip(&self.taps) {
            let mut acc = 0.0;
            let mut first = true;
            for &(i, wt) in taps {
                if wt != 0.0 {
                    let v = wt * src[i as usize];
                    if first {
                        acc = v;
                        first = false;
                    } else {
                        acc += v;
                    }
                }
            }
            *d = acc;
        }
    }

    pub fn apply_transpose(&self, dy: &[f64], dx: &mut [f64]) {
        for (g, taps) in dy.iter().zip(&self.taps) {
            for &(i, wt) in taps {
                if wt != 0.0 {
                    dx[i as usize] += wt * g;
                }
            }
        }
    }
}
