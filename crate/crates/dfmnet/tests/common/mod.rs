//! Independent reference implementations used to pin down the optimized
//! kernels: straightforward f64 loops with no shared code paths, plus
//! seeded input generators and the relative-tolerance rule.

#![allow(dead_code)]

use dfmnet::nn::{BnParams, ConvParams};
use dfmnet::tensor::{Shape, Tensor};
use dfmnet::weights::uniform_f32;

pub fn seeded_tensor(shape: Shape, seed: u64, lo: f32, hi: f32) -> Tensor {
    let mut state = seed;
    let data = (0..shape.count())
        .map(|_| uniform_f32(&mut state, lo, hi))
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// `|a - b| <= tol * (1 + |b|)`: absolute near zero, relative elsewhere.
pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

pub fn assert_tensor_close(got: &Tensor, want: &[f64], tol: f64, label: &str) {
    assert_eq!(got.data().len(), want.len(), "{label}: element count");
    for (i, (&g, &w)) in got.data().iter().zip(want).enumerate() {
        assert!(
            rel_close(g as f64, w, tol),
            "{label}: element {i}: got {g}, want {w}"
        );
    }
}

/// Plain six-loop convolution in f64 with stride, zero padding, dilation,
/// and channel groups.
pub fn conv2d_oracle(x: &Tensor, p: &ConvParams) -> Vec<f64> {
    let xs = x.shape();
    let ws = p.weight.shape();
    let (c_out, kh, kw) = (ws.n, ws.h, ws.w);
    let c_in_per_group = ws.c;
    let group_size_out = c_out / p.groups;
    let out_h = (xs.h + 2 * p.padding - p.dilation * (kh - 1) - 1) / p.stride + 1;
    let out_w = (xs.w + 2 * p.padding - p.dilation * (kw - 1) - 1) / p.stride + 1;
    let mut out = vec![0f64; xs.n * c_out * out_h * out_w];
    let mut idx = 0;
    for n in 0..xs.n {
        for co in 0..c_out {
            let group = co / group_size_out;
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = p.bias[co] as f64;
                    for ci in 0..c_in_per_group {
                        let xc = group * c_in_per_group + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * p.stride + ky * p.dilation) as isize
                                    - p.padding as isize;
                                let ix = (ox * p.stride + kx * p.dilation) as isize
                                    - p.padding as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize
                                {
                                    continue;
                                }
                                let xv = x.get(n, xc, iy as usize, ix as usize) as f64;
                                let wv = p.weight.get(co, ci, ky, kx) as f64;
                                acc += xv * wv;
                            }
                        }
                    }
                    out[idx] = acc;
                    idx += 1;
                }
            }
        }
    }
    out
}

pub fn maxpool2_oracle(x: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(s.n * s.c * oh * ow);
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x.get(n, c, 2 * oy + dy, 2 * ox + dx) as f64);
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    out
}

/// Half-pixel bilinear interpolation with edge clamping, all in f64.
pub fn bilinear_oracle(x: &Tensor, out_h: usize, out_w: usize) -> Vec<f64> {
    let s = x.shape();
    let scale_y = s.h as f64 / out_h as f64;
    let scale_x = s.w as f64 / out_w as f64;
    let mut out = Vec::with_capacity(s.n * s.c * out_h * out_w);
    let clamp = |v: f64, hi: usize| v.max(0.0).min(hi as f64 - 1.0);
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..out_h {
                let sy = clamp((oy as f64 + 0.5) * scale_y - 0.5, s.h);
                let y0 = sy.floor() as usize;
                let y1 = (y0 + 1).min(s.h - 1);
                let fy = sy - y0 as f64;
                for ox in 0..out_w {
                    let sx = clamp((ox as f64 + 0.5) * scale_x - 0.5, s.w);
                    let x0 = sx.floor() as usize;
                    let x1 = (x0 + 1).min(s.w - 1);
                    let fx = sx - x0 as f64;
                    let v00 = x.get(n, c, y0, x0) as f64;
                    let v01 = x.get(n, c, y0, x1) as f64;
                    let v10 = x.get(n, c, y1, x0) as f64;
                    let v11 = x.get(n, c, y1, x1) as f64;
                    let top = v00 + (v01 - v00) * fx;
                    let bot = v10 + (v11 - v10) * fx;
                    out.push(top + (bot - top) * fy);
                }
            }
        }
    }
    out
}

pub fn gap_oracle(x: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let mut out = Vec::with_capacity(s.n * s.c);
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = x.plane(n, c);
            out.push(plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64);
        }
    }
    out
}

/// Adaptive average pooling with the standard floor/ceil region bounds.
pub fn adaptive_avg_pool_oracle(x: &Tensor, bins: usize) -> Vec<f64> {
    let s = x.shape();
    let mut out = Vec::with_capacity(s.n * s.c * bins * bins);
    for n in 0..s.n {
        for c in 0..s.c {
            for by in 0..bins {
                let y0 = by * s.h / bins;
                let y1 = ((by + 1) * s.h).div_ceil(bins);
                for bx in 0..bins {
                    let x0 = bx * s.w / bins;
                    let x1 = ((bx + 1) * s.w).div_ceil(bins);
                    let mut acc = 0f64;
                    for y in y0..y1 {
                        for x_ in x0..x1 {
                            acc += x.get(n, c, y, x_) as f64;
                        }
                    }
                    out.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
    }
    out
}

/// Evaluates BatchNorm the unfolded way: normalize then affine, in f64.
pub fn batchnorm_oracle(conv_out: &[f64], channels: usize, plane: usize, bn: &BnParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(conv_out.len());
    for (i, &v) in conv_out.iter().enumerate() {
        let c = (i / plane) % channels;
        let norm = (v - bn.mean[c] as f64) / ((bn.var[c] as f64 + bn.eps as f64).sqrt());
        out.push(norm * bn.gamma[c] as f64 + bn.beta[c] as f64);
    }
    out
}

/// Elementwise binary cross-entropy in f64 with the same clamping rule
/// the library documents.
pub fn bce_oracle(pred: &Tensor, target: &Tensor) -> f64 {
    let mut sum = 0f64;
    for (&p, &g) in pred.data().iter().zip(target.data()) {
        let p = (p as f64).clamp(1e-7_f32 as f64, (1.0 - 1e-7_f32) as f64);
        let g = g as f64;
        sum -= g * p.ln() + (1.0 - g) * (1.0 - p).ln();
    }
    sum / pred.data().len() as f64
}
