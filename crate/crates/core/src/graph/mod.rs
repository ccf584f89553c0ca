//! Layer descriptions, the fire module, the SqueezeNet assembly and the
//! timed executor.
//!
//! A network is described as a list of [`LayerSpec`]s. [`build_graph`]
//! binds weights, checks the shape chain, expands fire modules and
//! quantization stages into primitive steps, and plans every activation
//! buffer up front. A [`Session`] owns one instance of that buffer plan and
//! runs the steps, timing each one.

mod build;
mod exec;
mod squeezenet;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{conv2d, relu_in_place, relu_view, ConvParams, PoolParams, WeightTensor};
use crate::quant::QuantParams;
use crate::tensor::{Shape, Tensor};

pub use build::{build_graph, Graph, QuantMode, StepInfo};
pub use exec::{Clock, MonotonicClock, Session, TimingEntry, TimingReport};
pub use squeezenet::{
    build_squeezenet, calibrate, calibrate_layers, squeezenet_v1_0, synthetic_image, synthetic_input,
    synthetic_weights, BuildOptions, ARCH, NUM_CLASSES,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    ReLU,
    MaxPool,
    Fire,
    /// Completion marker of a fire module's zero-copy concatenation.
    Concat,
    GlobalAvgPool,
    Scale,
    Softmax,
    Quantize,
    Dequantize,
    Requantize,
}

impl LayerKind {
    pub const ALL: [LayerKind; 11] = [
        LayerKind::Conv,
        LayerKind::ReLU,
        LayerKind::MaxPool,
        LayerKind::Fire,
        LayerKind::Concat,
        LayerKind::GlobalAvgPool,
        LayerKind::Scale,
        LayerKind::Softmax,
        LayerKind::Quantize,
        LayerKind::Dequantize,
        LayerKind::Requantize,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::ReLU => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Fire => "fire",
            LayerKind::Concat => "concat",
            LayerKind::GlobalAvgPool => "globalavgpool",
            LayerKind::Scale => "scale",
            LayerKind::Softmax => "softmax",
            LayerKind::Quantize => "quantize",
            LayerKind::Dequantize => "dequantize",
            LayerKind::Requantize => "requantize",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Report(format!("unknown layer kind `{s}`")))
    }
}

/// Channel counts of one fire module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FireConfig {
    /// 1×1 squeeze filters.
    pub squeeze: usize,
    /// 1×1 expand filters.
    pub expand1: usize,
    /// 3×3 expand filters.
    pub expand3: usize,
}

impl FireConfig {
    pub fn new(squeeze: usize, expand1: usize, expand3: usize) -> Result<Self> {
        if squeeze == 0 || expand1 == 0 || expand3 == 0 {
            return Err(Error::Argument(format!(
                "fire channel counts must be positive, got ({squeeze}, {expand1}, {expand3})"
            )));
        }
        Ok(FireConfig {
            squeeze,
            expand1,
            expand3,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.expand1 + self.expand3
    }

    pub(crate) fn squeeze_conv() -> ConvParams {
        ConvParams::square(1, 1, 0).expect("static params")
    }

    pub(crate) fn expand1_conv() -> ConvParams {
        ConvParams::square(1, 1, 0).expect("static params")
    }

    pub(crate) fn expand3_conv() -> ConvParams {
        ConvParams::square(3, 1, 1).expect("static params")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerParams {
    Conv { filters: usize, conv: ConvParams },
    ReLU,
    MaxPool(PoolParams),
    Fire(FireConfig),
    GlobalAvgPool,
    Scale(f32),
    Softmax,
    Quantize(QuantParams),
    Requantize(QuantParams),
    Dequantize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub params: LayerParams,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, params: LayerParams) -> Self {
        LayerSpec {
            name: name.into(),
            params,
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self.params {
            LayerParams::Conv { .. } => LayerKind::Conv,
            LayerParams::ReLU => LayerKind::ReLU,
            LayerParams::MaxPool(_) => LayerKind::MaxPool,
            LayerParams::Fire(_) => LayerKind::Fire,
            LayerParams::GlobalAvgPool => LayerKind::GlobalAvgPool,
            LayerParams::Scale(_) => LayerKind::Scale,
            LayerParams::Softmax => LayerKind::Softmax,
            LayerParams::Quantize(_) => LayerKind::Quantize,
            LayerParams::Requantize(_) => LayerKind::Requantize,
            LayerParams::Dequantize => LayerKind::Dequantize,
        }
    }
}

/// Float filters of one fire module.
#[derive(Clone, Debug)]
pub struct FireWeights {
    pub squeeze: WeightTensor,
    pub expand1: WeightTensor,
    pub expand3: WeightTensor,
}

impl FireWeights {
    fn check(&self, in_channels: usize, cfg: &FireConfig) -> Result<()> {
        let expect = |what: &str, w: &WeightTensor, out: usize, inp: usize, k: usize| {
            if w.out_channels() != out || w.in_channels() != inp || w.kernel() != (k, k) {
                return Err(Error::Shape(format!(
                    "{what} filters are {}, expected {out}x{inp}x{k}x{k}",
                    w.tensor().shape()
                )));
            }
            Ok(())
        };
        expect("squeeze", &self.squeeze, cfg.squeeze, in_channels, 1)?;
        expect("expand1x1", &self.expand1, cfg.expand1, cfg.squeeze, 1)?;
        expect("expand3x3", &self.expand3, cfg.expand3, cfg.squeeze, 3)
    }
}

/// Runs a fire module into caller-provided buffers.
///
/// `squeeze` receives the squeeze activation; the two expand branches
/// write channels `[0, expand1)` and `[expand1, expand1 + expand3)` of
/// `out` directly, so no concatenation copy happens.
pub fn fire_into(
    input: &Tensor,
    cfg: &FireConfig,
    weights: &FireWeights,
    squeeze: &mut Tensor,
    out: &mut Tensor,
) -> Result<()> {
    let s = input.shape();
    weights.check(s.c, cfg)?;
    conv2d(
        input,
        &weights.squeeze,
        &FireConfig::squeeze_conv(),
        &mut squeeze.view_mut(),
    )?;
    relu_in_place(squeeze)?;

    let mut left = out.slice_channels(0, cfg.expand1)?;
    conv2d(squeeze, &weights.expand1, &FireConfig::expand1_conv(), &mut left)?;
    relu_view(&mut left)?;

    let mut right = out.slice_channels(cfg.expand1, cfg.expand3)?;
    conv2d(squeeze, &weights.expand3, &FireConfig::expand3_conv(), &mut right)?;
    relu_view(&mut right)
}

/// Allocating fire module: output shape `(n, expand1 + expand3, h, w)`.
pub fn fire(input: &Tensor, cfg: &FireConfig, weights: &FireWeights) -> Result<Tensor> {
    let s = input.shape();
    weights.check(s.c, cfg)?;
    let mut squeeze = Tensor::zeros(s.with_channels(cfg.squeeze))?;
    let mut out = Tensor::zeros(Shape::new(s.n, cfg.out_channels(), s.h, s.w)?)?;
    fire_into(input, cfg, weights, &mut squeeze, &mut out)?;
    Ok(out)
}
