// Raw slice kernels behind the tape ops. Shapes are validated by the caller.
//
// Inner loops are written as axpy sweeps over contiguous rows so the f64
// accumulators vectorise; summation order is fixed, which keeps results
// bit-identical between runs.

/// Fixed-order f64 dot product with four interleaved accumulators.
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += f64::from(a[j]) * f64::from(b[j]);
        acc[1] += f64::from(a[j + 1]) * f64::from(b[j + 1]);
        acc[2] += f64::from(a[j + 2]) * f64::from(b[j + 2]);
        acc[3] += f64::from(a[j + 3]) * f64::from(b[j + 3]);
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += f64::from(a[j]) * f64::from(b[j]);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(acc: &mut [f64], alpha: f64, x: &[f32]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += alpha * f64::from(v);
    }
}

fn round_into(acc: &[f64], out: &mut [f32]) {
    for (o, &a) in out.iter_mut().zip(acc) {
        *o = a as f32;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    /// Output columns `ox` whose input column `ox*stride + kw - padding` is in range.
    fn col_range(&self, kw: usize) -> (usize, usize) {
        let lo = if kw >= self.padding {
            0
        } else {
            (self.padding - kw).div_ceil(self.stride)
        };
        // largest ox with ox*stride + kw - padding <= width - 1
        let limit = self.width + self.padding;
        let hi = if kw >= limit {
            0
        } else {
            ((limit - 1 - kw) / self.stride + 1).min(self.out_width)
        };
        (lo, hi.max(lo))
    }

    fn input_row(&self, oy: usize, kh: usize) -> Option<usize> {
        let pos = oy * self.stride + kh;
        if pos < self.padding || pos - self.padding >= self.height {
            None
        } else {
            Some(pos - self.padding)
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f32], weight: &[f32], bias: Option<&[f32]>, out: &mut [f32]) {
    let plane = g.out_height * g.out_width;
    let in_plane = g.height * g.width;
    let k2 = g.kernel * g.kernel;
    let mut acc = vec![0.0f64; plane];
    for o in 0..g.out_channels {
        let b = bias.map_or(0.0, |b| f64::from(b[o]));
        acc.iter_mut().for_each(|a| *a = b);
        for c in 0..g.channels {
            let chan = &input[c * in_plane..(c + 1) * in_plane];
            let wbase = (o * g.channels + c) * k2;
            for kh in 0..g.kernel {
                for kw in 0..g.kernel {
                    let w = f64::from(weight[wbase + kh * g.kernel + kw]);
                    let (lo, hi) = g.col_range(kw);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..g.out_height {
                        let Some(iy) = g.input_row(oy, kh) else { continue };
                        let row = &chan[iy * g.width..(iy + 1) * g.width];
                        let dst = &mut acc[oy * g.out_width + lo..oy * g.out_width + hi];
                        let start = lo * g.stride + kw - g.padding;
                        if g.stride == 1 {
                            axpy(dst, w, &row[start..start + (hi - lo)]);
                        } else {
                            for (i, a) in dst.iter_mut().enumerate() {
                                *a += w * f64::from(row[start + i * g.stride]);
                            }
                        }
                    }
                }
            }
        }
        round_into(&acc, &mut out[o * plane..(o + 1) * plane]);
    }
}

pub(crate) fn conv2d_backward_input(g: &ConvGeom, weight: &[f32], grad_out: &[f32]) -> Vec<f32> {
    let plane = g.out_height * g.out_width;
    let in_plane = g.height * g.width;
    let k2 = g.kernel * g.kernel;
    let mut result = vec![0.0f32; g.channels * in_plane];
    let mut acc = vec![0.0f64; in_plane];
    for c in 0..g.channels {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for o in 0..g.out_channels {
            let go = &grad_out[o * plane..(o + 1) * plane];
            let wbase = (o * g.channels + c) * k2;
            for kh in 0..g.kernel {
                for kw in 0..g.kernel {
                    let w = f64::from(weight[wbase + kh * g.kernel + kw]);
                    let (lo, hi) = g.col_range(kw);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..g.out_height {
                        let Some(iy) = g.input_row(oy, kh) else { continue };
                        let src = &go[oy * g.out_width + lo..oy * g.out_width + hi];
                        let start = iy * g.width + lo * g.stride + kw - g.padding;
                        if g.stride == 1 {
                            axpy(&mut acc[start..start + (hi - lo)], w, src);
                        } else {
                            for (i, &v) in src.iter().enumerate() {
                                acc[start + i * g.stride] += w * f64::from(v);
                            }
                        }
                    }
                }
            }
        }
        round_into(&acc, &mut result[c * in_plane..(c + 1) * in_plane]);
    }
    result
}

pub(crate) fn conv2d_backward_weight(g: &ConvGeom, input: &[f32], grad_out: &[f32]) -> Vec<f32> {
    let plane = g.out_height * g.out_width;
    let in_plane = g.height * g.width;
    let k2 = g.kernel * g.kernel;
    let mut result = vec![0.0f32; g.out_channels * g.channels * k2];
    for o in 0..g.out_channels {
        let go = &grad_out[o * plane..(o + 1) * plane];
        for c in 0..g.channels {
            let chan = &input[c * in_plane..(c + 1) * in_plane];
            for kh in 0..g.kernel {
                for kw in 0..g.kernel {
                    let (lo, hi) = g.col_range(kw);
                    let mut acc = 0.0f64;
                    if lo < hi {
                        for oy in 0..g.out_height {
                            let Some(iy) = g.input_row(oy, kh) else { continue };
                            let src = &go[oy * g.out_width + lo..oy * g.out_width + hi];
                            let start = iy * g.width + lo * g.stride + kw - g.padding;
                            if g.stride == 1 {
                                acc += dot(src, &chan[start..start + (hi - lo)]);
                            } else {
                                for (i, &v) in src.iter().enumerate() {
                                    acc += f64::from(v) * f64::from(chan[start + i * g.stride]);
                                }
                            }
                        }
                    }
                    result[(o * g.channels + c) * k2 + kh * g.kernel + kw] = acc as f32;
                }
            }
        }
    }
    result
}

pub(crate) fn conv2d_backward_bias(g: &ConvGeom, grad_out: &[f32]) -> Vec<f32> {
    let plane = g.out_height * g.out_width;
    (0..g.out_channels)
        .map(|o| {
            grad_out[o * plane..(o + 1) * plane]
                .iter()
                .map(|&v| f64::from(v))
                .sum::<f64>() as f32
        })
        .collect()
}

/// Max pooling without padding. Returns outputs and the flat input index of
/// each window's maximum (first occurrence in scan order on ties).
pub(crate) fn max_pool_forward(
    input: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
) -> (Vec<f32>, Vec<u32>, usize, usize) {
    let oh = (height - kernel) / stride + 1;
    let ow = (width - kernel) / stride + 1;
    let mut out = Vec::with_capacity(channels * oh * ow);
    let mut arg = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let base = c * height * width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = base + oy * stride * width + ox * stride;
                for ky in 0..kernel {
                    let row = base + (oy * stride + ky) * width + ox * stride;
                    for kx in 0..kernel {
                        let v = input[row + kx];
                        if v > best {
                            best = v;
                            best_idx = row + kx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (out, arg, oh, ow)
}

/// `a [m,k] x b [k,n]`.
pub(crate) fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            axpy(&mut acc, f64::from(a[i * k + p]), &b[p * n..(p + 1) * n]);
        }
        round_into(&acc, &mut out[i * n..(i + 1) * n]);
    }
    out
}

/// `g [m,n] x b^T` where `b` is `[k,n]`.
pub(crate) fn matmul_grad_a(g: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * k];
    for i in 0..m {
        for p in 0..k {
            out[i * k + p] = dot(&g[i * n..(i + 1) * n], &b[p * n..(p + 1) * n]) as f32;
        }
    }
    out
}

/// `a^T x g` where `a` is `[m,k]`, `g` is `[m,n]`.
pub(crate) fn matmul_grad_b(a: &[f32], g: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(&mut acc[p * n..(p + 1) * n], f64::from(a[i * k + p]), grow);
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Dense layer: `w [out,in] . x + b`.
pub(crate) fn affine_forward(x: &[f32], w: &[f32], b: Option<&[f32]>, out_dim: usize) -> Vec<f32> {
    let in_dim = x.len();
    (0..out_dim)
        .map(|j| {
            let bias = b.map_or(0.0, |b| f64::from(b[j]));
            (bias + dot(&w[j * in_dim..(j + 1) * in_dim], x)) as f32
        })
        .collect()
}

pub(crate) fn affine_grad_input(w: &[f32], g: &[f32], in_dim: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; in_dim];
    for (j, &gj) in g.iter().enumerate() {
        axpy(&mut acc, f64::from(gj), &w[j * in_dim..(j + 1) * in_dim]);
    }
    acc.into_iter().map(|v| v as f32).collect()
}

pub(crate) fn affine_grad_weight(x: &[f32], g: &[f32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len() * g.len());
    for &gj in g {
        out.extend(x.iter().map(|&xi| gj * xi));
    }
    out
}
