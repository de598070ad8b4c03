//! Encoder backbones: inverted residual blocks, the tailored depth backbone
//! (TDB), and the MobileNet-v2-style branch used for RGB (and optionally
//! for depth, as an ablation). Both produce five hierarchy features at
//! strides 2, 4, 8, 16, 16 relative to the 256x256 input.

use crate::error::{Error, Result};
use crate::loader::{ConvSpec, LayerSource};
use crate::nn::{conv2d, relu, ConvParams};
use crate::tensor::{ewise_add, Tensor};

/// One inverted-residual stage: `blocks` repeats of an expansion-`t` block
/// producing `channels` outputs; only the first block applies `stride`.
#[derive(Clone, Copy, Debug)]
pub struct StageSpec {
    pub expansion: usize,
    pub channels: usize,
    pub blocks: usize,
    pub stride: usize,
}

const fn stage(expansion: usize, channels: usize, blocks: usize, stride: usize) -> StageSpec {
    StageSpec {
        expansion,
        channels,
        blocks,
        stride,
    }
}

/// Tailored depth backbone schedule, one stage per hierarchy.
pub const TDB_STAGES: [StageSpec; 5] = [
    stage(3, 16, 1, 2),
    stage(3, 24, 3, 2),
    stage(3, 32, 7, 2),
    stage(2, 96, 3, 2),
    stage(2, 320, 1, 1),
];

/// MobileNet-v2-style schedule grouped by hierarchy. The final stage runs
/// at stride 1 so hierarchies 4 and 5 share the 16x16 resolution, and the
/// classifier-oriented tail conv is omitted.
pub const MOBILE_STAGES: [&[StageSpec]; 5] = [
    &[stage(1, 16, 1, 1)],
    &[stage(6, 24, 2, 2)],
    &[stage(6, 32, 3, 2)],
    &[stage(6, 64, 4, 2), stage(6, 96, 3, 1)],
    &[stage(6, 160, 3, 1), stage(6, 320, 1, 1)],
];

/// Channel widths of the five hierarchy features, shared by both backbones.
pub const HIERARCHY_CHANNELS: [usize; 5] = [16, 24, 32, 96, 320];

/// Inverted residual block: 1x1 expansion (BN+ReLU), 3x3 depthwise
/// (BN+ReLU), 1x1 linear projection (BN), with an identity skip when the
/// block keeps stride and width.
#[derive(Clone, Debug)]
pub struct IrbBlock {
    pub expand: ConvParams,
    pub dw: ConvParams,
    pub project: ConvParams,
    pub skip: bool,
}

impl IrbBlock {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = relu(&conv2d(x, &self.expand)?);
        let h = relu(&conv2d(&h, &self.dw)?);
        let out = conv2d(&h, &self.project)?;
        if self.skip {
            ewise_add(&out, x)
        } else {
            Ok(out)
        }
    }
}

pub fn build_irb_stage(
    src: &mut dyn LayerSource,
    prefix: &str,
    c_in: usize,
    spec: StageSpec,
) -> Result<Vec<IrbBlock>> {
    let mut blocks = Vec::with_capacity(spec.blocks);
    let mut c_prev = c_in;
    for b in 0..spec.blocks {
        let stride = if b == 0 { spec.stride } else { 1 };
        let hidden = spec.expansion * c_prev;
        let name = |part: &str| format!("{prefix}.block{b}.{part}");
        let expand = src.conv(&name("expand"), ConvSpec::new(c_prev, hidden, 1))?;
        let dw = src.conv(
            &name("dw"),
            ConvSpec::new(hidden, hidden, 3).stride(stride).depthwise(),
        )?;
        let project = src.conv(&name("project"), ConvSpec::new(hidden, spec.channels, 1))?;
        blocks.push(IrbBlock {
            expand,
            dw,
            project,
            skip: stride == 1 && c_prev == spec.channels,
        });
        c_prev = spec.channels;
    }
    Ok(blocks)
}

fn forward_stage(blocks: &[IrbBlock], x: &Tensor) -> Result<Tensor> {
    let mut cur = blocks[0].forward(x)?;
    for block in &blocks[1..] {
        cur = block.forward(&cur)?;
    }
    Ok(cur)
}

/// The five hierarchy features of one encoder stream.
#[derive(Clone, Debug)]
pub struct HierarchyFeatures {
    pub levels: [Tensor; 5],
}

/// Tailored depth backbone: five IRB stages straight off the 1-channel
/// depth map, no stem conv.
#[derive(Clone, Debug)]
pub struct TdbBackbone {
    stages: [Vec<IrbBlock>; 5],
}

impl TdbBackbone {
    pub fn build(src: &mut dyn LayerSource, prefix: &str) -> Result<Self> {
        let mut c_in = 1;
        let mut stages = Vec::with_capacity(5);
        for (i, spec) in TDB_STAGES.iter().enumerate() {
            stages.push(build_irb_stage(src, &format!("{prefix}.h{}", i + 1), c_in, *spec)?);
            c_in = spec.channels;
        }
        Ok(TdbBackbone {
            stages: stages.try_into().expect("five stages"),
        })
    }

    pub fn forward(&self, depth: &Tensor) -> Result<HierarchyFeatures> {
        let s = depth.shape();
        if s.c != 1 {
            return Err(Error::ChannelMismatch(format!(
                "depth backbone expects 1 channel, got {}",
                s.c
            )));
        }
        let h1 = forward_stage(&self.stages[0], depth)?;
        let h2 = forward_stage(&self.stages[1], &h1)?;
        let h3 = forward_stage(&self.stages[2], &h2)?;
        let h4 = forward_stage(&self.stages[3], &h3)?;
        let h5 = forward_stage(&self.stages[4], &h4)?;
        Ok(HierarchyFeatures {
            levels: [h1, h2, h3, h4, h5],
        })
    }
}

/// MobileNet-v2-style branch: 3x3 stride-2 stem (BN+ReLU) followed by the
/// hierarchy stages. Exposes per-stage stepping so fused features can be
/// re-injected between hierarchies.
#[derive(Clone, Debug)]
pub struct MobileBackbone {
    stem: ConvParams,
    stages: [Vec<IrbBlock>; 5],
}

impl MobileBackbone {
    pub fn build(src: &mut dyn LayerSource, prefix: &str, in_channels: usize) -> Result<Self> {
        let stem = src.conv(&format!("{prefix}.stem"), ConvSpec::new(in_channels, 32, 3).stride(2))?;
        let mut c_in = 32;
        let mut stages = Vec::with_capacity(5);
        for (i, group) in MOBILE_STAGES.iter().enumerate() {
            let mut blocks = Vec::new();
            for (j, spec) in group.iter().enumerate() {
                let prefix = if group.len() == 1 {
                    format!("{prefix}.h{}", i + 1)
                } else {
                    format!("{prefix}.h{}{}", i + 1, (b'a' + j as u8) as char)
                };
                blocks.extend(build_irb_stage(src, &prefix, c_in, *spec)?);
                c_in = spec.channels;
            }
            stages.push(blocks);
        }
        Ok(MobileBackbone {
            stem,
            stages: stages.try_into().expect("five stages"),
        })
    }

    /// Runs hierarchy `level` (1-based). Level 1 includes the stem; levels
    /// 2..=5 expect the (possibly fused) feature of the previous hierarchy.
    pub fn stage(&self, level: usize, x: &Tensor) -> Result<Tensor> {
        match level {
            1 => {
                let stem = relu(&conv2d(x, &self.stem)?);
                forward_stage(&self.stages[0], &stem)
            }
            2..=5 => forward_stage(&self.stages[level - 1], x),
            _ => Err(Error::InvalidArgument(format!(
                "hierarchy level {level} outside 1..=5"
            ))),
        }
    }

    /// Runs all five hierarchies without fusion (depth-ablation use).
    pub fn forward(&self, x: &Tensor) -> Result<HierarchyFeatures> {
        let h1 = self.stage(1, x)?;
        let h2 = self.stage(2, &h1)?;
        let h3 = self.stage(3, &h2)?;
        let h4 = self.stage(4, &h3)?;
        let h5 = self.stage(5, &h4)?;
        Ok(HierarchyFeatures {
            levels: [h1, h2, h3, h4, h5],
        })
    }
}
