//! Bridges weight stores and runtime layers. Model builders describe each
//! conv layer once through [`LayerSource::conv`]; feeding them a
//! [`ManifestRecorder`] yields the expected entry table, feeding them a
//! [`WeightsLoader`] yields folded runtime parameters from a store. Using
//! the same walk for both makes the manifest and the loader inseparable.

use crate::error::{Error, Result};
use crate::nn::{batchnorm_fold, BnParams, ConvParams};
use crate::tensor::{Shape, Tensor};
use crate::weights::{EntryKind, Manifest, ModelWeights};
use std::collections::HashSet;

/// BatchNorm epsilon used throughout the network.
pub const BN_EPS: f32 = 1e-5;

/// Static description of one convolution layer.
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
    pub bn: bool,
}

impl ConvSpec {
    /// Convolution with "same" padding for its kernel/dilation, BatchNorm,
    /// and no explicit bias. Adjust with the builder methods.
    pub fn new(c_in: usize, c_out: usize, k: usize) -> Self {
        ConvSpec {
            c_in,
            c_out,
            k,
            stride: 1,
            padding: k / 2,
            dilation: 1,
            groups: 1,
            bias: false,
            bn: true,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self.padding = d * (self.k - 1) / 2;
        self
    }

    pub fn depthwise(mut self) -> Self {
        self.groups = self.c_in;
        self
    }

    /// Plain biased conv with no BatchNorm (fully connected layers and
    /// prediction heads).
    pub fn biased(mut self) -> Self {
        self.bias = true;
        self.bn = false;
        self
    }

    fn weight_dims(&self) -> Vec<usize> {
        vec![self.c_out, self.c_in / self.groups, self.k, self.k]
    }
}

/// One layer request at a time, either recorded or resolved.
pub trait LayerSource {
    fn conv(&mut self, name: &str, spec: ConvSpec) -> Result<ConvParams>;
}

/// Records every requested layer into a manifest, handing back zero-filled
/// parameters so builders can run without a real store.
pub struct ManifestRecorder {
    pub manifest: Manifest,
}

impl ManifestRecorder {
    pub fn new() -> Self {
        ManifestRecorder {
            manifest: Manifest::default(),
        }
    }
}

impl Default for ManifestRecorder {
    fn default() -> Self {
        Self::new()
    }
}

impl LayerSource for ManifestRecorder {
    fn conv(&mut self, name: &str, spec: ConvSpec) -> Result<ConvParams> {
        self.manifest
            .push(format!("{name}.weight"), spec.weight_dims(), EntryKind::Weight);
        if spec.bias {
            self.manifest
                .push(format!("{name}.bias"), vec![spec.c_out], EntryKind::Bias);
        }
        if spec.bn {
            for (suffix, kind) in [
                ("gamma", EntryKind::BnGamma),
                ("beta", EntryKind::BnBeta),
                ("mean", EntryKind::BnMean),
                ("var", EntryKind::BnVar),
            ] {
                self.manifest
                    .push(format!("{name}.bn.{suffix}"), vec![spec.c_out], kind);
            }
        }
        let dims = spec.weight_dims();
        ConvParams::new(
            Tensor::zeros(Shape::new(dims[0], dims[1], dims[2], dims[3])),
            vec![0.0; spec.c_out],
            spec.stride,
            spec.padding,
            spec.dilation,
            spec.groups,
        )
    }
}

/// Resolves layers against a loaded store, folding BatchNorm into each conv
/// and tracking which entries were consumed.
pub struct WeightsLoader<'a> {
    store: &'a ModelWeights,
    consumed: HashSet<String>,
}

impl<'a> WeightsLoader<'a> {
    pub fn new(store: &'a ModelWeights) -> Self {
        WeightsLoader {
            store,
            consumed: HashSet::new(),
        }
    }

    fn take(&mut self, name: String, dims: &[usize]) -> Result<Vec<f32>> {
        let entry = self
            .store
            .get(&name)
            .ok_or_else(|| Error::MissingEntry(name.clone()))?;
        if entry.dims != dims {
            return Err(Error::WeightShape {
                name,
                expected: dims.to_vec(),
                found: entry.dims.clone(),
            });
        }
        self.consumed.insert(name);
        Ok(entry.data.clone())
    }

    /// Errors if the store holds entries no layer asked for.
    pub fn finish(self) -> Result<()> {
        for (name, _) in self.store.entries() {
            if !self.consumed.contains(name) {
                return Err(Error::UnexpectedEntry(name.to_string()));
            }
        }
        Ok(())
    }
}

impl LayerSource for WeightsLoader<'_> {
    fn conv(&mut self, name: &str, spec: ConvSpec) -> Result<ConvParams> {
        let dims = spec.weight_dims();
        let weight = self.take(format!("{name}.weight"), &dims)?;
        let weight = Tensor::new(Shape::new(dims[0], dims[1], dims[2], dims[3]), weight)?;
        let bias = if spec.bias {
            self.take(format!("{name}.bias"), &[spec.c_out])?
        } else {
            vec![0.0; spec.c_out]
        };
        let conv = ConvParams::new(weight, bias, spec.stride, spec.padding, spec.dilation, spec.groups)?;
        if spec.bn {
            let bn = BnParams {
                gamma: self.take(format!("{name}.bn.gamma"), &[spec.c_out])?,
                beta: self.take(format!("{name}.bn.beta"), &[spec.c_out])?,
                mean: self.take(format!("{name}.bn.mean"), &[spec.c_out])?,
                var: self.take(format!("{name}.bn.var"), &[spec.c_out])?,
                eps: BN_EPS,
            };
            batchnorm_fold(&conv, &bn)
        } else {
            Ok(conv)
        }
    }
}
