//! Neural-network kernels: 2-D convolution (cross-correlation), BatchNorm
//! folding, activations, pooling, and bilinear resampling.
//!
//! Every kernel is deterministic. Convolutions accumulate in f32 in a fixed
//! (input-channel, kernel-row, kernel-col) order per output element, so the
//! optional row-parallel execution is bit-identical to the sequential path.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};
use rayon::prelude::*;
use std::sync::{Mutex, OnceLock};
use std::sync::atomic::{AtomicUsize, Ordering};

type CachedPool = Option<(usize, std::sync::Arc<rayon::ThreadPool>)>;

static THREADS: AtomicUsize = AtomicUsize::new(1);
static POOL: OnceLock<Mutex<CachedPool>> = OnceLock::new();

/// Sets the number of threads kernels may use. 1 (the default) keeps all
/// kernels on the calling thread. Results do not depend on this setting.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::SeqCst);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::SeqCst)
}

fn pool(n: usize) -> std::sync::Arc<rayon::ThreadPool> {
    let lock = POOL.get_or_init(|| Mutex::new(None));
    let mut guard = lock.lock().unwrap();
    match &*guard {
        Some((size, pool)) if *size == n => pool.clone(),
        _ => {
            let pool = std::sync::Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .expect("thread pool"),
            );
            *guard = Some((n, pool.clone()));
            pool
        }
    }
}

/// Runs `f(plane_index, plane)` over equally sized output planes, in
/// parallel when more than one thread is configured. Planes are disjoint and
/// each is computed exactly as in the sequential path.
fn for_each_plane(out: &mut [f32], plane_len: usize, f: impl Fn(usize, &mut [f32]) + Sync) {
    let n = threads();
    if n > 1 && out.len() / plane_len > 1 {
        pool(n).install(|| {
            out.par_chunks_mut(plane_len)
                .enumerate()
                .for_each(|(i, chunk)| f(i, chunk));
        });
    } else {
        for (i, chunk) in out.chunks_mut(plane_len).enumerate() {
            f(i, chunk);
        }
    }
}

/// Convolution parameters with bias already in folded (inference) form.
/// Weight layout is (c_out, c_in / groups, k_h, k_w).
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvParams {
    pub fn new(
        weight: Tensor,
        bias: Vec<f32>,
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<Self> {
        if stride == 0 || dilation == 0 || groups == 0 {
            return Err(Error::InvalidArgument(
                "stride, dilation, and groups must be at least 1".into(),
            ));
        }
        let c_out = weight.shape().n;
        if !c_out.is_multiple_of(groups) {
            return Err(Error::InvalidArgument(format!(
                "output channels {c_out} not divisible by groups {groups}"
            )));
        }
        if bias.len() != c_out {
            return Err(Error::ShapeMismatch(format!(
                "bias length {} does not match {c_out} output channels",
                bias.len()
            )));
        }
        if let Some(i) = bias.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("bias element {i} is {}", bias[i])));
        }
        Ok(ConvParams {
            weight,
            bias,
            stride,
            padding,
            dilation,
            groups,
        })
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n
    }

    /// Input channels expected on the tensor this conv is applied to.
    pub fn c_in(&self) -> usize {
        self.weight.shape().c * self.groups
    }

    fn kernel(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (s.h, s.w)
    }
}

/// Unfolded BatchNorm parameters as stored in a weight file.
#[derive(Clone, Debug)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BnParams {
    pub fn identity(channels: usize, eps: f32) -> Self {
        BnParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps,
        }
    }
}

/// Folds BatchNorm into the preceding convolution: the returned conv
/// computes `bn(conv(x))` exactly, with per-channel scale
/// `gamma / sqrt(var + eps)` applied to weights and bias.
pub fn batchnorm_fold(conv: &ConvParams, bn: &BnParams) -> Result<ConvParams> {
    let c_out = conv.c_out();
    if bn.gamma.len() != c_out
        || bn.beta.len() != c_out
        || bn.mean.len() != c_out
        || bn.var.len() != c_out
    {
        return Err(Error::ShapeMismatch(format!(
            "batchnorm over {} channels applied to conv with {c_out} outputs",
            bn.gamma.len()
        )));
    }
    let mut scale = Vec::with_capacity(c_out);
    for (i, &v) in bn.var.iter().enumerate() {
        let denom = (v as f64 + bn.eps as f64).sqrt();
        if !(denom.is_finite() && denom > 0.0) {
            return Err(Error::NonFinite(format!(
                "batchnorm channel {i}: variance {v} with eps {} is not usable",
                bn.eps
            )));
        }
        scale.push((bn.gamma[i] as f64 / denom) as f32);
    }
    let ws = conv.weight.shape();
    let per_filter = ws.c * ws.h * ws.w;
    let mut weight = Vec::with_capacity(conv.weight.data().len());
    for (co, chunk) in conv.weight.data().chunks_exact(per_filter).enumerate() {
        weight.extend(chunk.iter().map(|&w| w * scale[co]));
    }
    let bias: Vec<f32> = (0..c_out)
        .map(|co| (conv.bias[co] - bn.mean[co]) * scale[co] + bn.beta[co])
        .collect();
    ConvParams::new(
        Tensor::new(ws, weight)?,
        bias,
        conv.stride,
        conv.padding,
        conv.dilation,
        conv.groups,
    )
}

fn conv_output_dims(x: Shape, p: &ConvParams) -> Result<(usize, usize)> {
    let (kh, kw) = p.kernel();
    let eff_h = p.dilation * (kh - 1) + 1;
    let eff_w = p.dilation * (kw - 1) + 1;
    if x.h + 2 * p.padding < eff_h || x.w + 2 * p.padding < eff_w {
        return Err(Error::WindowExceedsInput(format!(
            "kernel {kh}x{kw} dilation {} on {}x{} input with padding {}",
            p.dilation, x.h, x.w, p.padding
        )));
    }
    let out_h = (x.h + 2 * p.padding - eff_h) / p.stride + 1;
    let out_w = (x.w + 2 * p.padding - eff_w) / p.stride + 1;
    Ok((out_h, out_w))
}

/// 2-D convolution (cross-correlation, zero padding). Supports stride,
/// dilation, and grouped/depthwise forms.
pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let xs = x.shape();
    if xs.c != p.c_in() {
        return Err(Error::ChannelMismatch(format!(
            "input has {} channels, conv expects {}",
            xs.c,
            p.c_in()
        )));
    }
    let (out_h, out_w) = conv_output_dims(xs, p)?;
    let (kh, kw) = p.kernel();

    let pointwise = kh == 1
        && kw == 1
        && p.stride == 1
        && p.padding == 0
        && p.groups == 1;
    let depthwise = p.groups == xs.c && p.weight.shape().c == 1 && p.c_out() == xs.c;
    let dense_s1 = p.groups == 1 && p.stride == 1 && !pointwise;

    if pointwise {
        conv2d_pointwise(x, p, out_h, out_w)
    } else if depthwise {
        conv2d_depthwise(x, p, out_h, out_w)
    } else if dense_s1 {
        conv2d_dense_s1(x, p, out_h, out_w)
    } else {
        conv2d_general(x, p, out_h, out_w)
    }
}

/// 1x1 stride-1 convolution as a per-plane multiply-accumulate. Input
/// channels are consumed in ascending order, four at a time.
fn conv2d_pointwise(x: &Tensor, p: &ConvParams, out_h: usize, out_w: usize) -> Result<Tensor> {
    let xs = x.shape();
    let (c_in, c_out) = (xs.c, p.c_out());
    let hw = out_h * out_w;
    let w = p.weight.data();
    let mut out = vec![0.0f32; xs.n * c_out * hw];
    for_each_plane(&mut out, hw, |plane_idx, acc| {
        let n = plane_idx / c_out;
        let co = plane_idx % c_out;
        acc.fill(p.bias[co]);
        let wrow = &w[co * c_in..(co + 1) * c_in];
        let mut ci = 0;
        while ci + 4 <= c_in {
            let (w0, w1, w2, w3) = (wrow[ci], wrow[ci + 1], wrow[ci + 2], wrow[ci + 3]);
            let x0 = x.plane(n, ci);
            let x1 = x.plane(n, ci + 1);
            let x2 = x.plane(n, ci + 2);
            let x3 = x.plane(n, ci + 3);
            for i in 0..hw {
                acc[i] = acc[i] + w0 * x0[i] + w1 * x1[i] + w2 * x2[i] + w3 * x3[i];
            }
            ci += 4;
        }
        while ci < c_in {
            let wv = wrow[ci];
            let xp = x.plane(n, ci);
            for i in 0..hw {
                acc[i] += wv * xp[i];
            }
            ci += 1;
        }
    });
    Ok(Tensor::from_parts(Shape::new(xs.n, c_out, out_h, out_w), out))
}

/// Depthwise convolution: one filter per channel, any stride/dilation.
fn conv2d_depthwise(x: &Tensor, p: &ConvParams, out_h: usize, out_w: usize) -> Result<Tensor> {
    let xs = x.shape();
    let (kh, kw) = p.kernel();
    let (s, pad, d) = (p.stride, p.padding, p.dilation);
    let hw = out_h * out_w;
    let w = p.weight.data();
    let mut out = vec![0.0f32; xs.n * xs.c * hw];
    for_each_plane(&mut out, hw, |plane_idx, acc| {
        let n = plane_idx / xs.c;
        let c = plane_idx % xs.c;
        acc.fill(p.bias[c]);
        let xp = x.plane(n, c);
        let filt = &w[c * kh * kw..(c + 1) * kh * kw];
        for ky in 0..kh {
            for kx in 0..kw {
                let wv = filt[ky * kw + kx];
                for oy in 0..out_h {
                    let iy = (oy * s + ky * d) as isize - pad as isize;
                    if iy < 0 || iy as usize >= xs.h {
                        continue;
                    }
                    let xrow = &xp[iy as usize * xs.w..(iy as usize + 1) * xs.w];
                    let orow = &mut acc[oy * out_w..(oy + 1) * out_w];
                    // Valid ox range: 0 <= ox*s + kx*d - pad < w.
                    let off = kx * d;
                    let ox_lo = if off >= pad { 0 } else { (pad - off).div_ceil(s) };
                    let ox_hi = ((xs.w + pad).saturating_sub(off).saturating_sub(1) / s + 1).min(out_w);
                    if s == 1 {
                        let base = ox_lo + off - pad;
                        for (o, xv) in orow[ox_lo..ox_hi].iter_mut().zip(&xrow[base..]) {
                            *o += wv * xv;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            orow[ox] += wv * xrow[ox * s + off - pad];
                        }
                    }
                }
            }
        }
    });
    Ok(Tensor::from_parts(Shape::new(xs.n, xs.c, out_h, out_w), out))
}

/// Dense stride-1 convolution via a zero-padded input copy and long
/// shifted multiply-accumulate runs over a padded output plane.
fn conv2d_dense_s1(x: &Tensor, p: &ConvParams, out_h: usize, out_w: usize) -> Result<Tensor> {
    let xs = x.shape();
    let (kh, kw) = p.kernel();
    let (pad, d) = (p.padding, p.dilation);
    let c_out = p.c_out();
    let ph = xs.h + 2 * pad;
    let pw = xs.w + 2 * pad;
    let w = p.weight.data();

    let mut padded = vec![0.0f32; xs.n * xs.c * ph * pw];
    for n in 0..xs.n {
        for c in 0..xs.c {
            let src = x.plane(n, c);
            let dst_base = (n * xs.c + c) * ph * pw;
            for y in 0..xs.h {
                let dst = dst_base + (y + pad) * pw + pad;
                padded[dst..dst + xs.w].copy_from_slice(&src[y * xs.w..(y + 1) * xs.w]);
            }
        }
    }

    // Each (co, ci, ky, kx) contributes one long run over the padded plane;
    // the padded accumulator's rightmost columns are scratch and dropped on
    // extraction.
    let run = (out_h - 1) * pw + out_w;
    let hw = out_h * out_w;
    let mut out = vec![0.0f32; xs.n * c_out * hw];
    let per_filter = xs.c * kh * kw;
    for_each_plane(&mut out, hw, |plane_idx, dst| {
        let n = plane_idx / c_out;
        let co = plane_idx % c_out;
        let mut acc = vec![p.bias[co]; out_h * pw];
        let filt = &w[co * per_filter..(co + 1) * per_filter];
        for ci in 0..xs.c {
            let xp = &padded[(n * xs.c + ci) * ph * pw..(n * xs.c + ci + 1) * ph * pw];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = filt[(ci * kh + ky) * kw + kx];
                    let src = &xp[ky * d * pw + kx * d..];
                    for (a, xv) in acc[..run].iter_mut().zip(&src[..run]) {
                        *a += wv * xv;
                    }
                }
            }
        }
        for oy in 0..out_h {
            dst[oy * out_w..(oy + 1) * out_w]
                .copy_from_slice(&acc[oy * pw..oy * pw + out_w]);
        }
    });
    Ok(Tensor::from_parts(Shape::new(xs.n, c_out, out_h, out_w), out))
}

/// Fallback covering strided and grouped cases.
fn conv2d_general(x: &Tensor, p: &ConvParams, out_h: usize, out_w: usize) -> Result<Tensor> {
    let xs = x.shape();
    let (kh, kw) = p.kernel();
    let (s, pad, d) = (p.stride, p.padding, p.dilation);
    let c_out = p.c_out();
    let cpg_in = p.weight.shape().c;
    let cpg_out = c_out / p.groups;
    let hw = out_h * out_w;
    let w = p.weight.data();
    let per_filter = cpg_in * kh * kw;
    let mut out = vec![0.0f32; xs.n * c_out * hw];
    for_each_plane(&mut out, hw, |plane_idx, acc| {
        let n = plane_idx / c_out;
        let co = plane_idx % c_out;
        let g = co / cpg_out;
        let filt = &w[co * per_filter..(co + 1) * per_filter];
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut sum = p.bias[co];
                for ci in 0..cpg_in {
                    let xp = x.plane(n, g * cpg_in + ci);
                    for ky in 0..kh {
                        let iy = (oy * s + ky * d) as isize - pad as isize;
                        if iy < 0 || iy as usize >= xs.h {
                            continue;
                        }
                        let xrow = &xp[iy as usize * xs.w..(iy as usize + 1) * xs.w];
                        for kx in 0..kw {
                            let ix = (ox * s + kx * d) as isize - pad as isize;
                            if ix < 0 || ix as usize >= xs.w {
                                continue;
                            }
                            sum += filt[(ci * kh + ky) * kw + kx] * xrow[ix as usize];
                        }
                    }
                }
                acc[oy * out_w + ox] = sum;
            }
        }
    });
    Ok(Tensor::from_parts(Shape::new(xs.n, c_out, out_h, out_w), out))
}

/// Rectified linear unit.
pub fn relu(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_parts(t.shape(), data)
}

/// Largest f32 strictly below 1.
const ONE_BELOW: f32 = 1.0 - f32::EPSILON / 2.0;

fn sigmoid_scalar(x: f32) -> f32 {
    // Evaluate the branch whose exp() argument is non-positive, then clamp
    // away the exact 0/1 endpoints that extreme inputs would round to.
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f32::MIN_POSITIVE, ONE_BELOW)
}

/// Logistic sigmoid, strictly inside (0,1) for every finite input.
pub fn sigmoid(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    Tensor::from_parts(t.shape(), data)
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
pub fn maxpool2(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    if s.h < 2 || s.w < 2 {
        return Err(Error::WindowExceedsInput(format!(
            "2x2 pooling window on {}x{} input",
            s.h, s.w
        )));
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(s.n * s.c * oh * ow);
    for n in 0..s.n {
        for c in 0..s.c {
            let xp = t.plane(n, c);
            for oy in 0..oh {
                let r0 = &xp[2 * oy * s.w..];
                let r1 = &xp[(2 * oy + 1) * s.w..];
                for ox in 0..ow {
                    let m = r0[2 * ox]
                        .max(r0[2 * ox + 1])
                        .max(r1[2 * ox])
                        .max(r1[2 * ox + 1]);
                    out.push(m);
                }
            }
        }
    }
    Ok(Tensor::from_parts(Shape::new(s.n, s.c, oh, ow), out))
}

/// Bilinear resize with half-pixel centers: the source coordinate for
/// output index i is (i + 0.5) * in/out - 0.5, clamped to the input. Each
/// output value is clamped to the hull of its four neighbors, so constants
/// are preserved exactly and outputs never leave the input's value range.
pub fn bilinear_resize(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = t.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(
            "resize target must be at least 1x1".into(),
        ));
    }
    struct Axis {
        lo: usize,
        hi: usize,
        frac: f32,
    }
    let axis = |in_len: usize, out_len: usize| -> Vec<Axis> {
        let scale = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(in_len - 1);
                Axis {
                    lo,
                    hi,
                    frac: (src - lo as f64) as f32,
                }
            })
            .collect()
    };
    let ys = axis(s.h, out_h);
    let xs = axis(s.w, out_w);
    let mut out = Vec::with_capacity(s.n * s.c * out_h * out_w);
    for n in 0..s.n {
        for c in 0..s.c {
            let xp = t.plane(n, c);
            for ay in &ys {
                let r0 = &xp[ay.lo * s.w..(ay.lo + 1) * s.w];
                let r1 = &xp[ay.hi * s.w..(ay.hi + 1) * s.w];
                for ax in &xs {
                    let (v00, v01) = (r0[ax.lo], r0[ax.hi]);
                    let (v10, v11) = (r1[ax.lo], r1[ax.hi]);
                    let top = v00 + ax.frac * (v01 - v00);
                    let bot = v10 + ax.frac * (v11 - v10);
                    let v = top + ay.frac * (bot - top);
                    let lo = v00.min(v01).min(v10).min(v11);
                    let hi = v00.max(v01).max(v10).max(v11);
                    out.push(v.clamp(lo, hi));
                }
            }
        }
    }
    Ok(Tensor::from_parts(Shape::new(s.n, s.c, out_h, out_w), out))
}

/// Adaptive average pooling to a square bin grid. Bin (i,j) averages the
/// region [floor(i*h/b), ceil((i+1)*h/b)) x [floor(j*w/b), ceil((j+1)*w/b)).
pub fn adaptive_avg_pool(t: &Tensor, bins: usize) -> Result<Tensor> {
    if bins == 0 {
        return Err(Error::InvalidArgument("bin count must be at least 1".into()));
    }
    let s = t.shape();
    let bound = |i: usize, len: usize| -> (usize, usize) {
        let lo = i * len / bins;
        let hi = ((i + 1) * len).div_ceil(bins);
        (lo, hi)
    };
    let mut out = Vec::with_capacity(s.n * s.c * bins * bins);
    for n in 0..s.n {
        for c in 0..s.c {
            let xp = t.plane(n, c);
            for by in 0..bins {
                let (y0, y1) = bound(by, s.h);
                for bx in 0..bins {
                    let (x0, x1) = bound(bx, s.w);
                    let mut sum = 0.0f64;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            sum += xp[y * s.w + x] as f64;
                        }
                    }
                    out.push((sum / ((y1 - y0) * (x1 - x0)) as f64) as f32);
                }
            }
        }
    }
    Ok(Tensor::from_parts(Shape::new(s.n, s.c, bins, bins), out))
}
