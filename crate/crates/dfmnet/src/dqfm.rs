//! Depth-quality feature manipulation. Two small heads read the first
//! hierarchy of both encoder streams: the depth quality weight (DQW) head
//! scores RGB/depth agreement and emits per-hierarchy gates alpha, and the
//! depth holistic attention (DHA) head combines low-level agreement with
//! the deepest depth feature into spatial attention maps beta.

use crate::error::{Error, Result};
use crate::loader::{ConvSpec, LayerSource};
use crate::nn::{bilinear_resize, conv2d, maxpool2, relu, sigmoid, ConvParams};
use crate::tensor::{concat_channels, ewise_add, ewise_mul, gap, Tensor};

/// Smoothing constant added to the alignment denominator so empty maps
/// divide cleanly. Anywhere the means are not vanishingly small the f32
/// addition absorbs it and the ratio is exact.
pub const ALIGNMENT_EPS: f32 = 1e-8;

/// Per-channel alignment of two non-negative feature maps:
/// `mean(a*b) / (mean(a+b) + eps)`, shaped `(n, c, 1, 1)`.
///
/// Identical binary masks score 0.5, disjoint masks score 0, and partial
/// overlap lands in between, so the value reads as an agreement ratio.
pub fn alignment_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "alignment inputs {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    if a.data().iter().chain(b.data().iter()).any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument(
            "alignment inputs must be non-negative".into(),
        ));
    }
    let num = gap(&ewise_mul(a, b)?);
    let den = gap(&ewise_add(a, b)?);
    let data = num
        .data()
        .iter()
        .zip(den.data())
        .map(|(&p, &s)| p / (s + ALIGNMENT_EPS))
        .collect();
    Tensor::new(num.shape(), data)
}

/// Single-image convenience wrapper returning one alignment value per
/// channel.
pub fn alignment_vector(a: &Tensor, b: &Tensor) -> Result<Vec<f32>> {
    if a.shape().n != 1 {
        return Err(Error::InvalidArgument(format!(
            "alignment_vector expects batch 1, got {}",
            a.shape().n
        )));
    }
    Ok(alignment_tensor(a, b)?.data().to_vec())
}

/// Alignment evaluated at full, half, and quarter resolution (max-pooled),
/// concatenated to `(n, 3*c, 1, 1)`.
pub fn multiscale_alignment(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let v1 = alignment_tensor(a, b)?;
    let (a2, b2) = (maxpool2(a)?, maxpool2(b)?);
    let v2 = alignment_tensor(&a2, &b2)?;
    let (a3, b3) = (maxpool2(&a2)?, maxpool2(&b2)?);
    let v3 = alignment_tensor(&a3, &b3)?;
    concat_channels(&[&v1, &v2, &v3])
}

/// Depth quality weight head. Both 16-channel hierarchy-1 features pass
/// through their own 1x1 transfer conv (BN+ReLU); the multiscale alignment
/// of the results feeds a tiny MLP whose sigmoid output gates how much
/// depth evidence each hierarchy receives.
#[derive(Clone, Debug)]
pub struct DqwParams {
    transfer_rgb: ConvParams,
    transfer_depth: ConvParams,
    fc1: ConvParams,
    fc2: ConvParams,
}

impl DqwParams {
    /// `gates` is the number of alpha values produced: one per hierarchy
    /// for independent gating, or a single shared value.
    pub fn build(src: &mut dyn LayerSource, prefix: &str, gates: usize) -> Result<Self> {
        Ok(DqwParams {
            transfer_rgb: src.conv(&format!("{prefix}.transfer_rgb"), ConvSpec::new(16, 16, 1))?,
            transfer_depth: src.conv(&format!("{prefix}.transfer_depth"), ConvSpec::new(16, 16, 1))?,
            fc1: src.conv(&format!("{prefix}.mlp.fc1"), ConvSpec::new(48, 24, 1).biased())?,
            fc2: src.conv(&format!("{prefix}.mlp.fc2"), ConvSpec::new(24, gates, 1).biased())?,
        })
    }

    pub fn gates(&self) -> usize {
        self.fc2.c_out()
    }

    /// Returns the gate tensor, shape `(n, gates, 1, 1)`, strictly inside
    /// `(0, 1)`.
    pub fn forward(&self, f_r1: &Tensor, f_d1: &Tensor) -> Result<Tensor> {
        let a = relu(&conv2d(f_r1, &self.transfer_rgb)?);
        let b = relu(&conv2d(f_d1, &self.transfer_depth)?);
        let v = multiscale_alignment(&a, &b)?;
        let h = relu(&conv2d(&v, &self.fc1)?);
        Ok(sigmoid(&conv2d(&h, &self.fc2)?))
    }
}

/// Depth holistic attention head. The deepest depth feature is compressed
/// to 16 channels and upsampled to hierarchy-1 resolution, recalibrated a
/// configurable number of times against the low-level RGB/depth agreement
/// map, and reduced to a single sigmoid attention map.
#[derive(Clone, Debug)]
pub struct DhaParams {
    compress: ConvParams,
    transfer_rgb: ConvParams,
    transfer_depth: ConvParams,
    recalibs: Vec<ConvParams>,
    beta_head: ConvParams,
}

impl DhaParams {
    pub fn build(src: &mut dyn LayerSource, prefix: &str, recalib_times: usize) -> Result<Self> {
        let compress = src.conv(&format!("{prefix}.compress"), ConvSpec::new(320, 16, 1))?;
        let transfer_rgb = src.conv(&format!("{prefix}.transfer_rgb"), ConvSpec::new(16, 16, 1))?;
        let transfer_depth =
            src.conv(&format!("{prefix}.transfer_depth"), ConvSpec::new(16, 16, 1))?;
        let mut recalibs = Vec::with_capacity(recalib_times);
        for i in 0..recalib_times {
            // Each pass has its own dilated 3x3 conv rather than sharing one.
            recalibs.push(src.conv(
                &format!("{prefix}.rec{i}"),
                ConvSpec::new(16, 16, 3).dilation(2),
            )?);
        }
        let beta_head = src.conv(&format!("{prefix}.beta_head"), ConvSpec::new(16, 1, 3))?;
        Ok(DhaParams {
            compress,
            transfer_rgb,
            transfer_depth,
            recalibs,
            beta_head,
        })
    }

    pub fn recalib_times(&self) -> usize {
        self.recalibs.len()
    }

    /// Returns the attention map at hierarchy-1 resolution, shape
    /// `(n, 1, h, w)` with `h, w` taken from `f_r1`, strictly inside
    /// `(0, 1)`.
    pub fn forward(&self, f_r1: &Tensor, f_d1: &Tensor, f_d5: &Tensor) -> Result<Tensor> {
        let (h, w) = (f_r1.shape().h, f_r1.shape().w);
        let f_dht = bilinear_resize(&relu(&conv2d(f_d5, &self.compress)?), h, w)?;
        let f_ec = ewise_mul(
            &relu(&conv2d(f_r1, &self.transfer_rgb)?),
            &relu(&conv2d(f_d1, &self.transfer_depth)?),
        )?;
        let mut x = f_dht;
        for rec in &self.recalibs {
            let pooled = maxpool2(&ewise_add(&x, &f_ec)?)?;
            x = bilinear_resize(&relu(&conv2d(&pooled, rec)?), h, w)?;
        }
        let merged = ewise_add(&f_ec, &x)?;
        Ok(sigmoid(&conv2d(&merged, &self.beta_head)?))
    }
}

/// Resamples the hierarchy-1 attention map to every hierarchy's
/// resolution. The deepest two hierarchies share one map since they share
/// a stride.
pub fn downsample_betas(beta: &Tensor) -> Result<[Tensor; 5]> {
    let b1 = beta.clone();
    let b2 = maxpool2(&b1)?;
    let b3 = maxpool2(&b2)?;
    let b4 = maxpool2(&b3)?;
    let b5 = b4.clone();
    Ok([b1, b2, b3, b4, b5])
}
