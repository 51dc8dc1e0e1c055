//! Structural re-parameterization: fold batch norms into convolutions,
//! widen 1-tap kernels, sum parallel kernels and rewrite whole graphs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GraphMode, Layer, ModelGraph};
use crate::nn::{Activation, BatchNorm1d, Conv1d, Padding};
use crate::repblock::RepConvBlock;
use crate::tensor::Tensor;

/// A convolution kernel with bias, produced by folding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedKernel {
    /// `(out_channels, in_channels / groups, k)`
    pub weight: Tensor,
    /// `(out_channels)`
    pub bias: Tensor,
}

impl FusedKernel {
    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn into_conv(self, stride: usize, groups: usize, padding: Padding) -> Result<Conv1d> {
        let [out_ch, ipg, k] = *self.weight.shape() else {
            return Err(Error::Shape("fused weight must be rank 3".into()));
        };
        let mut conv = Conv1d::new(ipg * groups, out_ch, k, stride, groups, padding, true)?;
        conv.weight = self.weight;
        conv.bias = Some(self.bias);
        Ok(conv)
    }
}

/// `W = (alpha / sigma) * w`, `b = beta - alpha * mu / sigma (+ alpha / sigma * conv_bias)`
/// with `sigma = sqrt(running_var + eps)`.
pub fn fold_conv_bn(conv: &Conv1d, bn: &BatchNorm1d) -> Result<FusedKernel> {
    bn.ensure_eval_ready()?;
    let out_ch = conv.out_channels();
    if bn.channels() != out_ch {
        return Err(Error::ChannelMismatch {
            expected: out_ch,
            got: bn.channels(),
        });
    }
    let per_out = conv.weight.numel() / out_ch;
    let mut weight = conv.weight.data().to_vec();
    let mut bias = vec![0.0f32; out_ch];
    for o in 0..out_ch {
        let sigma = (bn.running_var.data()[o] as f64 + bn.eps as f64).sqrt();
        let scale = bn.weight.data()[o] as f64 / sigma;
        for w in &mut weight[o * per_out..(o + 1) * per_out] {
            *w = (*w as f64 * scale) as f32;
        }
        let conv_bias = conv.bias.as_ref().map_or(0.0, |b| b.data()[o] as f64);
        bias[o] = (bn.bias.data()[o] as f64 + scale * (conv_bias - bn.running_mean.data()[o] as f64)) as f32;
    }
    Ok(FusedKernel {
        weight: Tensor::new(conv.weight.shape().to_vec(), weight)?,
        bias: Tensor::from_vec(bias),
    })
}

/// Places a 1-tap kernel inside a `k`-tap kernel so that, under `padding`,
/// the wider kernel computes the same output: the last tap for causal
/// padding, the centre tap for symmetric padding.
pub fn embed_1x1(kernel: &FusedKernel, k: usize, padding: Padding) -> Result<FusedKernel> {
    if k == 0 {
        return Err(Error::InvalidConfig("kernel size must be >= 1".into()));
    }
    if kernel.kernel_size() != 1 {
        return Err(Error::Shape(format!(
            "embed_1x1 expects a 1-tap kernel, got {} taps",
            kernel.kernel_size()
        )));
    }
    if k == 1 {
        return Ok(kernel.clone());
    }
    let tap = match padding {
        Padding::Causal => k - 1,
        Padding::Symmetric if k % 2 == 1 => k / 2,
        Padding::Symmetric => {
            return Err(Error::InvalidConfig(format!("symmetric padding needs an odd kernel, got {k}")))
        }
        Padding::Valid => {
            return Err(Error::InvalidConfig(
                "a 1-tap kernel cannot be widened under valid padding: output lengths differ".into(),
            ))
        }
    };
    let [out_ch, ipg, _] = *kernel.weight.shape() else {
        return Err(Error::Shape("kernel weight must be rank 3".into()));
    };
    let mut weight = vec![0.0f32; out_ch * ipg * k];
    for (i, &w) in kernel.weight.data().iter().enumerate() {
        weight[i * k + tap] = w;
    }
    Ok(FusedKernel {
        weight: Tensor::new(vec![out_ch, ipg, k], weight)?,
        bias: kernel.bias.clone(),
    })
}

/// Elementwise sum of kernels and of biases, accumulated in slice order.
pub fn merge_parallel(branches: &[FusedKernel]) -> Result<FusedKernel> {
    let first = branches
        .first()
        .ok_or_else(|| Error::Empty("merge_parallel needs at least one branch".into()))?;
    let mut merged = first.clone();
    for b in &branches[1..] {
        if b.weight.shape() != first.weight.shape() || b.bias.shape() != first.bias.shape() {
            return Err(Error::Shape(format!(
                "cannot merge kernel {:?} into {:?}",
                b.weight.shape(),
                first.weight.shape()
            )));
        }
        merged.weight.add_assign(&b.weight)?;
        merged.bias.add_assign(&b.bias)?;
    }
    Ok(merged)
}

/// Collapses a block into one depthwise k-tap convolution with bias. The
/// returned activation is an unbounded clip (equal to ReLU).
pub fn fuse_repblock(block: &RepConvBlock) -> Result<(Conv1d, Activation)> {
    let k = block.kernel_size();
    let mut kernels = Vec::with_capacity(block.num_branches() + 1);
    for b in &block.branches {
        if b.conv.kernel_size() != k || b.conv.stride != 1 || b.conv.padding != Padding::Causal {
            return Err(Error::InvalidConfig("all branches must share kernel size, stride 1 and causal padding".into()));
        }
        kernels.push(fold_conv_bn(&b.conv, &b.bn)?);
    }
    let one = fold_conv_bn(&block.one_by_one.conv, &block.one_by_one.bn)?;
    kernels.push(embed_1x1(&one, k, Padding::Causal)?);
    let fused = merge_parallel(&kernels)?.into_conv(1, block.channels(), Padding::Causal)?;
    Ok((fused, Activation::relu_clip()))
}

fn to_clip(act: &Activation) -> Activation {
    match *act {
        Activation::Relu => Activation::relu_clip(),
        clip => clip,
    }
}

/// Rewrites a training graph into its single-branch inference graph: every
/// block becomes one depthwise convolution with bias, every convolution
/// followed by batch norm becomes one convolution with bias, and every ReLU
/// becomes an unbounded clip.
pub fn fuse_model(graph: &ModelGraph) -> Result<ModelGraph> {
    if graph.mode == GraphMode::Fused {
        return Err(Error::GraphMode("graph is already fused".into()));
    }
    let mut layers = Vec::with_capacity(graph.layers.len());
    let mut i = 0;
    while i < graph.layers.len() {
        match (&graph.layers[i], graph.layers.get(i + 1)) {
            (Layer::Conv(conv), Some(Layer::BatchNorm(bn))) => {
                let folded = fold_conv_bn(conv, bn)?;
                layers.push(Layer::Conv(folded.into_conv(conv.stride, conv.groups, conv.padding)?));
                i += 2;
            }
            (Layer::Conv(conv), _) => {
                layers.push(Layer::Conv(conv.clone()));
                i += 1;
            }
            (Layer::BatchNorm(_), _) => {
                return Err(Error::GraphMode(format!("batch norm at layer {i} does not follow a convolution")));
            }
            (Layer::Activation(a), _) => {
                layers.push(Layer::Activation(to_clip(a)));
                i += 1;
            }
            (Layer::RepBlock(block), _) => {
                let (conv, _) = fuse_repblock(block)?;
                layers.push(Layer::Conv(conv));
                layers.push(Layer::Activation(to_clip(&block.activation)));
                i += 1;
            }
        }
    }
    Ok(ModelGraph {
        arch: graph.arch,
        config: graph.config.clone(),
        mode: GraphMode::Fused,
        layers,
    })
}

/// Sets every clip's upper bound to `margin` times the largest activation it
/// produced over `calibration` inputs (run with the current bounds).
pub fn calibrate_clip_bounds(graph: &mut ModelGraph, calibration: &[Tensor], margin: f32) -> Result<()> {
    if graph.mode != GraphMode::Fused {
        return Err(Error::GraphMode("clip calibration applies to fused graphs".into()));
    }
    if calibration.is_empty() {
        return Err(Error::Empty("no calibration inputs".into()));
    }
    let mut maxima = vec![0.0f32; graph.layers.len()];
    for x in calibration {
        let mut h = x.clone();
        for (i, layer) in graph.layers.iter().enumerate() {
            h = match layer {
                Layer::Conv(c) => c.forward(&h)?,
                Layer::Activation(a) => {
                    let y = a.forward(&h)?;
                    maxima[i] = maxima[i].max(y.max_abs());
                    y
                }
                other => return Err(Error::GraphMode(format!("unexpected {} in fused graph", other.kind()))),
            };
        }
    }
    for (layer, m) in graph.layers.iter_mut().zip(maxima) {
        if let Layer::Activation(Activation::Clip { upper, lower }) = layer {
            let bound = margin * m;
            if bound > *lower {
                *upper = Some(bound);
            }
        }
    }
    Ok(())
}
