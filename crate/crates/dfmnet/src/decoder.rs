//! Context head and decoder. A pyramid pooling module squeezes the
//! deepest fused feature into a sixth hierarchy, every hierarchy is
//! compressed to 16 channels and recalibrated by channel attention, and a
//! two-group fusion (shallow at hierarchy-1 resolution, deep at
//! hierarchy-4 resolution) produces the saliency map. A separate one-layer
//! head reads the deepest depth feature into the auxiliary depth saliency
//! map.

use crate::error::{Error, Result};
use crate::loader::{ConvSpec, LayerSource};
use crate::nn::{adaptive_avg_pool, bilinear_resize, conv2d, relu, sigmoid, ConvParams};
use crate::tensor::{concat_channels, ewise_add, ewise_mul, gap, Tensor};

/// Pooling grid sizes of the pyramid branches.
pub const PPM_BINS: [usize; 4] = [1, 2, 3, 6];

/// Channel widths of the six decoder inputs: the five fused hierarchies
/// plus the pyramid output.
pub const DECODER_CHANNELS: [usize; 6] = [16, 24, 32, 96, 320, 96];

/// Pyramid pooling module: four adaptive-average branches (1x1 conv
/// 320->80, BN+ReLU, upsampled back) concatenated and merged by a 3x3 conv
/// to 96 channels.
#[derive(Clone, Debug)]
pub struct Ppm {
    branches: Vec<ConvParams>,
    merge: ConvParams,
}

impl Ppm {
    pub fn build(src: &mut dyn LayerSource, prefix: &str) -> Result<Self> {
        let mut branches = Vec::with_capacity(PPM_BINS.len());
        for i in 0..PPM_BINS.len() {
            branches.push(src.conv(&format!("{prefix}.branch{i}"), ConvSpec::new(320, 80, 1))?);
        }
        let merge = src.conv(&format!("{prefix}.merge"), ConvSpec::new(320, 96, 3))?;
        Ok(Ppm { branches, merge })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (h, w) = (x.shape().h, x.shape().w);
        let mut ups = Vec::with_capacity(self.branches.len());
        for (bin, branch) in PPM_BINS.iter().zip(&self.branches) {
            let pooled = adaptive_avg_pool(x, *bin)?;
            let squeezed = relu(&conv2d(&pooled, branch)?);
            ups.push(bilinear_resize(&squeezed, h, w)?);
        }
        let refs: Vec<&Tensor> = ups.iter().collect();
        let stacked = concat_channels(&refs)?;
        Ok(relu(&conv2d(&stacked, &self.merge)?))
    }
}

/// Depthwise-separable 3x3 conv: depthwise then pointwise, BN+ReLU after
/// each half.
#[derive(Clone, Debug)]
pub struct DsConv {
    dw: ConvParams,
    pw: ConvParams,
}

impl DsConv {
    pub fn build(src: &mut dyn LayerSource, prefix: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(DsConv {
            dw: src.conv(&format!("{prefix}.dw"), ConvSpec::new(c_in, c_in, 3).depthwise())?,
            pw: src.conv(&format!("{prefix}.pw"), ConvSpec::new(c_in, c_out, 1))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = relu(&conv2d(x, &self.dw)?);
        Ok(relu(&conv2d(&h, &self.pw)?))
    }
}

/// Hierarchy adapter: depthwise-separable compression to 16 channels
/// followed by squeeze-and-excite style channel attention (16 -> 4 -> 16).
///
/// Channel attention is applied via a per-channel broadcast, so this stage
/// processes one image at a time.
#[derive(Clone, Debug)]
pub struct CompressEnhance {
    compress: DsConv,
    fc1: ConvParams,
    fc2: ConvParams,
}

impl CompressEnhance {
    pub fn build(
        src: &mut dyn LayerSource,
        compress_prefix: &str,
        ca_prefix: &str,
        c_in: usize,
    ) -> Result<Self> {
        Ok(CompressEnhance {
            compress: DsConv::build(src, compress_prefix, c_in, 16)?,
            fc1: src.conv(&format!("{ca_prefix}.fc1"), ConvSpec::new(16, 4, 1).biased())?,
            fc2: src.conv(&format!("{ca_prefix}.fc2"), ConvSpec::new(4, 16, 1).biased())?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().n != 1 {
            return Err(Error::InvalidArgument(format!(
                "channel attention expects batch 1, got {}",
                x.shape().n
            )));
        }
        let h = self.compress.forward(x)?;
        let squeezed = gap(&h);
        let a = relu(&conv2d(&squeezed, &self.fc1)?);
        let a = sigmoid(&conv2d(&a, &self.fc2)?);
        ewise_mul(&h, &a)
    }
}

/// Two-group decoder over the six compressed hierarchies.
#[derive(Clone, Debug)]
pub struct Decoder {
    stages: Vec<CompressEnhance>,
    ds1: DsConv,
    ds2: DsConv,
    head: ConvParams,
}

impl Decoder {
    pub fn build(src: &mut dyn LayerSource, prefix: &str) -> Result<Self> {
        let mut stages = Vec::with_capacity(6);
        for (i, c) in DECODER_CHANNELS.iter().enumerate() {
            stages.push(CompressEnhance::build(
                src,
                &format!("{prefix}.compress{}", i + 1),
                &format!("{prefix}.ca{}", i + 1),
                *c,
            )?);
        }
        Ok(Decoder {
            stages,
            ds1: DsConv::build(src, &format!("{prefix}.fuse.ds1"), 32, 16)?,
            ds2: DsConv::build(src, &format!("{prefix}.fuse.ds2"), 16, 16)?,
            head: src.conv(&format!("{prefix}.fuse.head"), ConvSpec::new(16, 1, 3).biased())?,
        })
    }

    /// Fuses the six hierarchy features into the saliency map, upsampled
    /// 2x past hierarchy-1 resolution back to the network input size.
    pub fn forward(&self, feats: &[Tensor; 6]) -> Result<Tensor> {
        let mut cf = Vec::with_capacity(6);
        for (stage, feat) in self.stages.iter().zip(feats) {
            cf.push(stage.forward(feat)?);
        }
        let (lh, lw) = (cf[0].shape().h, cf[0].shape().w);
        let low = ewise_add(
            &ewise_add(&cf[0], &bilinear_resize(&cf[1], lh, lw)?)?,
            &bilinear_resize(&cf[2], lh, lw)?,
        )?;
        let high = ewise_add(&ewise_add(&cf[3], &cf[4])?, &cf[5])?;
        let merged = concat_channels(&[&low, &bilinear_resize(&high, lh, lw)?])?;
        let fused = self.ds2.forward(&self.ds1.forward(&merged)?)?;
        let s = sigmoid(&conv2d(&fused, &self.head)?);
        bilinear_resize(&s, 2 * lh, 2 * lw)
    }
}

/// Auxiliary depth saliency head: 1x1 conv (BN) over the deepest depth
/// feature, sigmoid, upsampled to the network input size.
#[derive(Clone, Debug)]
pub struct PredHeadD {
    conv: ConvParams,
}

impl PredHeadD {
    pub fn build(src: &mut dyn LayerSource, prefix: &str) -> Result<Self> {
        Ok(PredHeadD {
            conv: src.conv(&format!("{prefix}.conv"), ConvSpec::new(320, 1, 1))?,
        })
    }

    pub fn forward(&self, f_d5: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
        let s = sigmoid(&conv2d(f_d5, &self.conv)?);
        bilinear_resize(&s, out_h, out_w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loader::{ManifestRecorder, WeightsLoader};
    use crate::tensor::Shape;
    use crate::weights::{init_random, uniform_f32, EntryKind, Manifest};

    fn seeded(shape: Shape, seed: u64) -> Tensor {
        let mut state = seed;
        let data = (0..shape.count()).map(|_| uniform_f32(&mut state, -1.0, 1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    fn learnable_values(manifest: &Manifest) -> usize {
        manifest
            .entries
            .iter()
            .filter(|e| {
                matches!(
                    e.kind,
                    EntryKind::Weight | EntryKind::Bias | EntryKind::BnGamma | EntryKind::BnBeta
                )
            })
            .map(|e| e.dims.iter().product::<usize>())
            .sum()
    }

    fn build_with<T>(
        build: impl Fn(&mut dyn LayerSource) -> Result<T>,
        seed: u64,
    ) -> (T, Manifest) {
        let mut rec = ManifestRecorder::new();
        build(&mut rec).unwrap();
        let store = init_random(&rec.manifest, seed);
        let mut loader = WeightsLoader::new(&store);
        let built = build(&mut loader).unwrap();
        loader.finish().unwrap();
        (built, rec.manifest)
    }

    #[test]
    fn ppm_squeezes_to_sixth_hierarchy_shape() {
        let (ppm, _) = build_with(|src| Ppm::build(src, "ppm"), 1);
        let x = seeded(Shape::new(1, 320, 16, 16), 1);
        let y = ppm.forward(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 96, 16, 16));
        assert!(y.data().iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn ppm_forward_matches_manual_branch_composition() {
        let (ppm, _) = build_with(|src| Ppm::build(src, "ppm"), 2);
        let x = seeded(Shape::new(1, 320, 8, 8), 2);
        let mut ups = Vec::new();
        for (bin, branch) in PPM_BINS.iter().zip(&ppm.branches) {
            let pooled = adaptive_avg_pool(&x, *bin).unwrap();
            let squeezed = relu(&conv2d(&pooled, branch).unwrap());
            ups.push(bilinear_resize(&squeezed, 8, 8).unwrap());
        }
        let refs: Vec<&Tensor> = ups.iter().collect();
        let manual = relu(&conv2d(&concat_channels(&refs).unwrap(), &ppm.merge).unwrap());
        assert_eq!(ppm.forward(&x).unwrap().data(), manual.data());
    }

    #[test]
    fn ppm_parameter_count_matches_closed_form() {
        let mut rec = ManifestRecorder::new();
        Ppm::build(&mut rec, "ppm").unwrap();
        // Four 320->80 branches (25760 each incl. affine) plus the 3x3
        // 320->96 merge (276672).
        assert_eq!(learnable_values(&rec.manifest), 379_712);
    }

    #[test]
    fn channel_attention_with_zeroed_fcs_halves_the_compressed_feature() {
        let mut rec = ManifestRecorder::new();
        CompressEnhance::build(&mut rec, "c", "a", 24).unwrap();
        let mut store = init_random(&rec.manifest, 3);
        for name in ["a.fc1.weight", "a.fc1.bias", "a.fc2.weight", "a.fc2.bias"] {
            store.get_mut(name).unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut loader = WeightsLoader::new(&store);
        let ce = CompressEnhance::build(&mut loader, "c", "a", 24).unwrap();
        let x = seeded(Shape::new(1, 24, 12, 12), 3);
        let got = ce.forward(&x).unwrap();
        let compressed = ce.compress.forward(&x).unwrap();
        let halved: Vec<f32> = compressed.data().iter().map(|v| v * 0.5).collect();
        assert_eq!(got.data(), &halved[..]);
    }

    #[test]
    fn channel_attention_rejects_batched_input() {
        let (ce, _) = build_with(|src| CompressEnhance::build(src, "c", "a", 16), 4);
        let x = seeded(Shape::new(2, 16, 8, 8), 4);
        assert!(ce.forward(&x).is_err());
    }

    fn decoder_inputs(scale: usize, seed: u64) -> [Tensor; 6] {
        let sizes = [8 * scale, 4 * scale, 2 * scale, scale, scale, scale];
        let mut out = Vec::new();
        for (i, (c, s)) in DECODER_CHANNELS.iter().zip(sizes).enumerate() {
            out.push(seeded(Shape::new(1, *c, s, s), seed + i as u64));
        }
        out.try_into().unwrap()
    }

    #[test]
    fn decoder_emits_a_map_at_twice_hierarchy_one_resolution() {
        let (dec, _) = build_with(|src| Decoder::build(src, "decoder"), 5);
        let feats = decoder_inputs(4, 10);
        let s = dec.forward(&feats).unwrap();
        assert_eq!(s.shape(), Shape::new(1, 1, 64, 64));
        for &v in s.data() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn decoder_forward_matches_manual_two_group_fusion() {
        let (dec, _) = build_with(|src| Decoder::build(src, "decoder"), 6);
        let feats = decoder_inputs(2, 20);
        let cf: Vec<Tensor> = dec
            .stages
            .iter()
            .zip(&feats)
            .map(|(st, f)| st.forward(f).unwrap())
            .collect();
        let low = ewise_add(
            &ewise_add(&cf[0], &bilinear_resize(&cf[1], 16, 16).unwrap()).unwrap(),
            &bilinear_resize(&cf[2], 16, 16).unwrap(),
        )
        .unwrap();
        let high = ewise_add(&ewise_add(&cf[3], &cf[4]).unwrap(), &cf[5]).unwrap();
        let merged =
            concat_channels(&[&low, &bilinear_resize(&high, 16, 16).unwrap()]).unwrap();
        let fused = dec.ds2.forward(&dec.ds1.forward(&merged).unwrap()).unwrap();
        let manual =
            bilinear_resize(&sigmoid(&conv2d(&fused, &dec.head).unwrap()), 32, 32).unwrap();
        assert_eq!(dec.forward(&feats).unwrap().data(), manual.data());
    }

    #[test]
    fn decoder_parameter_count_matches_closed_form() {
        let mut rec = ManifestRecorder::new();
        Decoder::build(&mut rec, "decoder").unwrap();
        // Six compress stages (15960) and attentions (888), the two fusion
        // convs (896 + 464) and the biased 3x3 head (145).
        assert_eq!(learnable_values(&rec.manifest), 18_353);
    }

    #[test]
    fn depth_head_reads_deepest_feature_into_full_size_map() {
        let (head, manifest) = build_with(|src| PredHeadD::build(src, "head_d"), 7);
        let f_d5 = seeded(Shape::new(1, 320, 16, 16), 30);
        let s = head.forward(&f_d5, 256, 256).unwrap();
        assert_eq!(s.shape(), Shape::new(1, 1, 256, 256));
        for &v in s.data() {
            assert!(v > 0.0 && v < 1.0);
        }
        assert_eq!(learnable_values(&manifest), 322);
    }
}
