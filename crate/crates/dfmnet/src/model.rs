//! Full network assembly: both encoder streams, the gating heads, the
//! pyramid context, and the decoder, together with the canonical weight
//! manifest, parameter statistics, and the training-style loss used to
//! sanity-check predictions.

use indexmap::IndexMap;
use serde::Serialize;

use crate::backbone::{HierarchyFeatures, MobileBackbone, TdbBackbone};
use crate::decoder::{Decoder, Ppm, PredHeadD};
use crate::dqfm::{downsample_betas, DhaParams, DqwParams};
use crate::error::{Error, Result};
use crate::loader::{LayerSource, ManifestRecorder, WeightsLoader};
use crate::tensor::{ewise_add, ewise_mul, Shape, Tensor};
use crate::weights::{self, EntryKind, Manifest, ModelWeights};

/// Side length both input maps are resized to before inference.
pub const INPUT_SIZE: usize = 256;

/// Maximum supported number of DHA recalibration passes.
pub const MAX_RECALIB_TIMES: usize = 3;

/// How many independent alpha gates the DQW head emits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gating {
    /// One gate per hierarchy.
    Multiple,
    /// A single gate shared by all hierarchies.
    Identical,
}

/// Which encoder reads the depth map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthBackbone {
    /// The tailored depth backbone.
    Tdb,
    /// A MobileNet-v2-style branch with a 1-channel stem, for comparing
    /// against the tailored design.
    MobilenetLike,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelConfig {
    /// Gate depth features by RGB/depth agreement. When off, alpha is 1.
    pub use_dqw: bool,
    /// Attend depth features spatially. When off, beta is 1 everywhere.
    pub use_dha: bool,
    /// DHA recalibration passes (0..=3). Changes the weight manifest.
    pub recalib_times: usize,
    pub gating: Gating,
    pub depth_backbone: DepthBackbone,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            use_dqw: true,
            use_dha: true,
            recalib_times: 2,
            gating: Gating::Multiple,
            depth_backbone: DepthBackbone::Tdb,
        }
    }
}

impl ModelConfig {
    fn gate_count(&self) -> usize {
        match self.gating {
            Gating::Multiple => 5,
            Gating::Identical => 1,
        }
    }
}

/// Depth encoder variant selected by the config.
#[derive(Clone, Debug)]
pub enum DepthEncoder {
    Tdb(TdbBackbone),
    Mobile(MobileBackbone),
}

impl DepthEncoder {
    pub fn forward(&self, depth: &Tensor) -> Result<HierarchyFeatures> {
        match self {
            DepthEncoder::Tdb(net) => net.forward(depth),
            DepthEncoder::Mobile(net) => net.forward(depth),
        }
    }
}

/// Per-image gate values actually applied during a forward pass.
#[derive(Clone, Debug)]
pub struct DqfmGates {
    pub alpha: [f32; 5],
    pub betas: [Tensor; 5],
}

#[derive(Clone, Debug)]
pub struct InferenceOutput {
    /// Saliency map from the fused stream, `(1, 1, 256, 256)`.
    pub s_c: Tensor,
    /// Auxiliary saliency map from the depth stream alone.
    pub s_d: Tensor,
    pub gates: DqfmGates,
}

/// Test-and-analysis overrides applied during a forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardHooks {
    /// Replace the computed (or implicit) alpha gates.
    pub force_alpha: Option<[f32; 5]>,
    /// Replace every beta map with a constant.
    pub force_beta: Option<f32>,
}

#[derive(Clone, Debug)]
pub struct DfmNet {
    config: ModelConfig,
    pub rgb: MobileBackbone,
    pub depth: DepthEncoder,
    pub dqw: DqwParams,
    pub dha: DhaParams,
    pub ppm: Ppm,
    pub decoder: Decoder,
    pub head_d: PredHeadD,
}

fn build_graph(src: &mut dyn LayerSource, cfg: &ModelConfig) -> Result<DfmNet> {
    if cfg.recalib_times > MAX_RECALIB_TIMES {
        return Err(Error::InvalidArgument(format!(
            "recalib_times {} exceeds {MAX_RECALIB_TIMES}",
            cfg.recalib_times
        )));
    }
    let rgb = MobileBackbone::build(src, "rgb", 3)?;
    let depth = match cfg.depth_backbone {
        DepthBackbone::Tdb => DepthEncoder::Tdb(TdbBackbone::build(src, "tdb")?),
        DepthBackbone::MobilenetLike => {
            DepthEncoder::Mobile(MobileBackbone::build(src, "depth_mnv2", 1)?)
        }
    };
    // The gating heads are always part of the weight set; use_dqw and
    // use_dha only decide whether the forward pass consults them.
    let dqw = DqwParams::build(src, "dqw", cfg.gate_count())?;
    let dha = DhaParams::build(src, "dha", cfg.recalib_times)?;
    let ppm = Ppm::build(src, "ppm")?;
    let decoder = Decoder::build(src, "decoder")?;
    let head_d = PredHeadD::build(src, "head_d")?;
    Ok(DfmNet {
        config: *cfg,
        rgb,
        depth,
        dqw,
        dha,
        ppm,
        decoder,
        head_d,
    })
}

impl DfmNet {
    /// Canonical entry list (names, shapes, order) for a configuration.
    pub fn manifest(cfg: &ModelConfig) -> Result<Manifest> {
        let mut rec = ManifestRecorder::new();
        build_graph(&mut rec, cfg)?;
        Ok(rec.manifest)
    }

    /// Builds the network from a weight store, consuming every entry
    /// exactly once and folding BatchNorm into the convolutions.
    pub fn from_weights(store: &ModelWeights, cfg: ModelConfig) -> Result<Self> {
        let mut loader = WeightsLoader::new(store);
        let net = build_graph(&mut loader, &cfg)?;
        loader.finish()?;
        Ok(net)
    }

    /// Builds the network with seeded random weights.
    pub fn init_random(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let store = weights::init_random(&Self::manifest(&cfg)?, seed);
        Self::from_weights(&store, cfg)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn forward(&self, rgb: &Tensor, depth: &Tensor) -> Result<InferenceOutput> {
        self.forward_hooked(rgb, depth, &ForwardHooks::default())
    }

    pub fn forward_hooked(
        &self,
        rgb: &Tensor,
        depth: &Tensor,
        hooks: &ForwardHooks,
    ) -> Result<InferenceOutput> {
        let want_rgb = Shape::new(1, 3, INPUT_SIZE, INPUT_SIZE);
        let want_depth = Shape::new(1, 1, INPUT_SIZE, INPUT_SIZE);
        if rgb.shape() != want_rgb {
            return Err(Error::ShapeMismatch(format!(
                "rgb input {} (expected {want_rgb})",
                rgb.shape()
            )));
        }
        if depth.shape() != want_depth {
            return Err(Error::ShapeMismatch(format!(
                "depth input {} (expected {want_depth})",
                depth.shape()
            )));
        }

        let d = self.depth.forward(depth)?;
        let f_r1 = self.rgb.stage(1, rgb)?;

        let alpha: [f32; 5] = if let Some(forced) = hooks.force_alpha {
            forced
        } else if self.config.use_dqw {
            let gates = self.dqw.forward(&f_r1, &d.levels[0])?;
            match self.config.gating {
                Gating::Identical => [gates.data()[0]; 5],
                Gating::Multiple => gates.data().try_into().expect("five gates"),
            }
        } else {
            [1.0; 5]
        };

        let betas: [Tensor; 5] = if let Some(value) = hooks.force_beta {
            build_constant_betas(&d, value)?
        } else if self.config.use_dha {
            downsample_betas(&self.dha.forward(&f_r1, &d.levels[0], &d.levels[4])?)?
        } else {
            build_constant_betas(&d, 1.0)?
        };

        let mut fused: Vec<Tensor> = Vec::with_capacity(6);
        let mut f_r = f_r1;
        for i in 0..5 {
            let f_c = fuse_level(&f_r, alpha[i], &betas[i], &d.levels[i])?;
            if i < 4 {
                f_r = self.rgb.stage(i + 2, &f_c)?;
            }
            fused.push(f_c);
        }
        fused.push(self.ppm.forward(&fused[4])?);
        let feats: [Tensor; 6] = fused.try_into().expect("six features");
        let s_c = self.decoder.forward(&feats)?;
        let s_d = self.head_d.forward(&d.levels[4], INPUT_SIZE, INPUT_SIZE)?;
        Ok(InferenceOutput {
            s_c,
            s_d,
            gates: DqfmGates { alpha, betas },
        })
    }
}

/// `f_r + alpha * (beta * f_d)`, in that multiplication order. A zero gate
/// prunes the depth term outright so gating and graph surgery agree
/// bitwise.
fn fuse_level(f_r: &Tensor, alpha: f32, beta: &Tensor, f_d: &Tensor) -> Result<Tensor> {
    if alpha == 0.0 {
        return Ok(f_r.clone());
    }
    let attended = ewise_mul(f_d, beta)?;
    let gated = ewise_mul(&attended, &Tensor::scalar(alpha)?)?;
    ewise_add(f_r, &gated)
}

fn build_constant_betas(d: &HierarchyFeatures, value: f32) -> Result<[Tensor; 5]> {
    let mut maps = Vec::with_capacity(5);
    for level in &d.levels {
        let s = level.shape();
        maps.push(Tensor::full(Shape::new(1, 1, s.h, s.w), value)?);
    }
    Ok(maps.try_into().expect("five maps"))
}

/// Clamp bounds applied to predictions inside the cross-entropy loss.
pub const BCE_CLAMP_LO: f32 = 1e-7;
pub const BCE_CLAMP_HI: f32 = 1.0 - 1e-7;

/// Mean binary cross-entropy between a prediction map and a target map
/// with values in [0, 1], accumulated in f64.
pub fn bce_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "loss inputs {} vs {}",
            pred.shape(),
            target.shape()
        )));
    }
    if target.data().iter().any(|&g| !(0.0..=1.0).contains(&g)) {
        return Err(Error::InvalidArgument(
            "loss target values must lie in [0, 1]".into(),
        ));
    }
    let mut sum = 0.0f64;
    for (&s, &g) in pred.data().iter().zip(target.data()) {
        let p = s.clamp(BCE_CLAMP_LO, BCE_CLAMP_HI) as f64;
        let g = g as f64;
        sum -= g * p.ln() + (1.0 - g) * (1.0 - p).ln();
    }
    Ok(sum / pred.data().len() as f64)
}

#[derive(Clone, Copy, Debug)]
pub struct LossValue {
    pub total: f64,
    pub l_c: f64,
    pub l_d: f64,
}

/// Joint loss: cross-entropy of both saliency maps against one target.
pub fn loss(out: &InferenceOutput, target: &Tensor) -> Result<LossValue> {
    let l_c = bce_loss(&out.s_c, target)?;
    let l_d = bce_loss(&out.s_d, target)?;
    Ok(LossValue {
        total: l_c + l_d,
        l_c,
        l_d,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupStats {
    pub name: String,
    /// Serialized float count (weights, biases, and all four BatchNorm
    /// vectors).
    pub values: usize,
    pub bytes: usize,
    pub mib: f64,
    /// Learnable float count (weights, biases, BatchNorm gamma and beta).
    pub learnable_values: usize,
    pub learnable_mib: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamStats {
    pub groups: Vec<GroupStats>,
    pub total_values: usize,
    pub total_bytes: usize,
    pub total_mib: f64,
    pub total_learnable_values: usize,
    pub total_learnable_mib: f64,
}

fn mib(values: usize) -> f64 {
    values as f64 * 4.0 / (1024.0 * 1024.0)
}

/// Aggregates manifest entries by their first name segment.
pub fn param_stats(manifest: &Manifest) -> ParamStats {
    let mut groups: IndexMap<String, (usize, usize)> = IndexMap::new();
    for entry in &manifest.entries {
        let group = entry.name.split('.').next().unwrap_or("").to_string();
        let count: usize = entry.dims.iter().product();
        let learnable = !matches!(entry.kind, EntryKind::BnMean | EntryKind::BnVar);
        let slot = groups.entry(group).or_insert((0, 0));
        slot.0 += count;
        if learnable {
            slot.1 += count;
        }
    }
    let groups: Vec<GroupStats> = groups
        .into_iter()
        .map(|(name, (values, learnable_values))| GroupStats {
            name,
            values,
            bytes: 4 * values,
            mib: mib(values),
            learnable_values,
            learnable_mib: mib(learnable_values),
        })
        .collect();
    let total_values = groups.iter().map(|g| g.values).sum();
    let total_learnable_values = groups.iter().map(|g| g.learnable_values).sum();
    ParamStats {
        groups,
        total_values,
        total_bytes: 4 * total_values,
        total_mib: mib(total_values),
        total_learnable_values,
        total_learnable_mib: mib(total_learnable_values),
    }
}
