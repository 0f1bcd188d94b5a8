//! Plain f64 reference implementations used as finite-difference oracles.
//! Nothing here shares code with the library kernels.

#![allow(dead_code)]

use cloakbench::models::{Classifier, LayerSpec};
use cloakbench::raster::Image;

/// `[C,H,W]` tensor in f64.
#[derive(Clone, Debug)]
pub struct T3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl T3 {
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }
}

pub fn conv2d(x: &T3, w: &[f64], b: Option<&[f64]>, out_c: usize, k: usize, stride: usize, pad: usize) -> T3 {
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let mut v = vec![0.0; out_c * oh * ow];
    for o in 0..out_c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = b.map_or(0.0, |b| b[o]);
                for c in 0..x.c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            s += w[((o * x.c + c) * k + ky) * k + kx] * x.at(c, iy as usize, ix as usize);
                        }
                    }
                }
                v[(o * oh + oy) * ow + ox] = s;
            }
        }
    }
    T3 {
        c: out_c,
        h: oh,
        w: ow,
        v,
    }
}

pub fn max_pool(x: &T3, k: usize, stride: usize) -> T3 {
    let oh = (x.h - k) / stride + 1;
    let ow = (x.w - k) / stride + 1;
    let mut v = Vec::with_capacity(x.c * oh * ow);
    for c in 0..x.c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for ky in 0..k {
                    for kx in 0..k {
                        m = m.max(x.at(c, oy * stride + ky, ox * stride + kx));
                    }
                }
                v.push(m);
            }
        }
    }
    T3 {
        c: x.c,
        h: oh,
        w: ow,
        v,
    }
}

pub fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&a| a.max(0.0)).collect()
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    out
}

pub fn affine(x: &[f64], w: &[f64], b: Option<&[f64]>, out: usize) -> Vec<f64> {
    (0..out)
        .map(|o| {
            b.map_or(0.0, |b| b[o])
                + x.iter()
                    .enumerate()
                    .map(|(i, &xi)| w[o * x.len() + i] * xi)
                    .sum::<f64>()
        })
        .collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn cross_entropy(z: &[f64], label: usize) -> f64 {
    -softmax(z)[label].ln()
}

/// Loss of `model` on pixel values `pixels` (HWC, `[0,255]`), all in f64.
pub fn model_loss(model: &Classifier, pixels: &[f64], side: usize, label: usize) -> f64 {
    let plane = side * side;
    let mut v = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            v[c * plane + i] = pixels[i * 3 + c] / 255.0;
        }
    }
    let mut h = T3 {
        c: 3,
        h: side,
        w: side,
        v,
    };
    let mut flat: Option<Vec<f64>> = None;
    let params: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| p.value().data().iter().map(|&x| f64::from(x)).collect())
        .collect();
    let mut next = 0;
    for layer in &model.descriptor().layers {
        match *layer {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                h = conv2d(
                    &h,
                    &params[next],
                    Some(&params[next + 1]),
                    out_channels,
                    kernel,
                    stride,
                    padding,
                );
                next += 2;
            }
            LayerSpec::Relu => match flat.as_mut() {
                Some(f) => *f = relu(f),
                None => h.v = relu(&h.v),
            },
            LayerSpec::MaxPool { kernel, stride } => h = max_pool(&h, kernel, stride),
            LayerSpec::Flatten => flat = Some(h.v.clone()),
            LayerSpec::Dense { out_features, .. } => {
                let x = flat.take().unwrap_or_else(|| h.v.clone());
                flat = Some(affine(&x, &params[next], Some(&params[next + 1]), out_features));
                next += 2;
            }
        }
    }
    cross_entropy(flat.as_ref().expect("network ends in a dense layer"), label)
}

pub fn image_f64(img: &Image) -> Vec<f64> {
    img.data().iter().map(|&v| f64::from(v)).collect()
}

/// Central difference of `f` at coordinate `i`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    p[i] += h;
    let up = f(&p);
    p[i] -= 2.0 * h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
