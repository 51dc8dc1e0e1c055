//! RepCNN and single-branch baseline graphs.
//!
//! Topology: a strided stem convolution with batch norm and ReLU, then for
//! every stage kernel `blocks_per_stage` depthwise blocks followed by a
//! pointwise convolution with batch norm and ReLU, and finally a pointwise
//! head producing one logit per output frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::join;
use crate::nn::{Activation, BatchNorm1d, BnMode, Conv1d, Padding, ParamGrads, Parameterized, TensorRole};
use crate::repblock::{RepBlockCache, RepConvBlock};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepCnnConfig {
    /// MFCC coefficients per frame.
    pub in_channels: usize,
    pub width: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stage_kernels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub num_branches: usize,
}

impl Default for RepCnnConfig {
    fn default() -> Self {
        Self {
            in_channels: 16,
            width: 44,
            stem_kernel: 5,
            stem_stride: 2,
            stage_kernels: vec![7, 9, 11, 13],
            blocks_per_stage: 2,
            num_branches: 2,
        }
    }
}

impl RepCnnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.in_channels == 0 || self.width == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.stem_kernel == 0 || self.stem_stride == 0 {
            return bad("stem kernel and stride must be positive".into());
        }
        if self.stage_kernels.is_empty() {
            return bad("at least one stage kernel is required".into());
        }
        if let Some(k) = self.stage_kernels.iter().find(|&&k| k < 3 || k % 2 == 0) {
            return bad(format!("stage kernels must be odd and >= 3, got {k}"));
        }
        if self.blocks_per_stage == 0 {
            return bad("blocks_per_stage must be >= 1".into());
        }
        if self.num_branches == 0 {
            return bad("num_branches must be >= 1".into());
        }
        Ok(())
    }

    /// Input frames that can influence one output: `1 + sum (k_i - 1) * jump_i`.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1 + (self.stem_kernel - 1);
        let jump = self.stem_stride;
        for &k in &self.stage_kernels {
            rf += self.blocks_per_stage * (k - 1) * jump;
        }
        rf
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Multi-branch blocks.
    RepCnn,
    /// One depthwise convolution + batch norm in place of every block.
    SingleBranch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    Train,
    Fused,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv1d),
    BatchNorm(BatchNorm1d),
    Activation(Activation),
    RepBlock(RepConvBlock),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Activation(_) => "activation",
            Layer::RepBlock(_) => "rep_block",
        }
    }

    fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(c) => c.forward(x),
            Layer::BatchNorm(b) => b.forward_eval(x),
            Layer::Activation(a) => a.forward(x),
            Layer::RepBlock(b) => b.forward_eval(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub arch: Architecture,
    pub config: RepCnnConfig,
    pub mode: GraphMode,
    pub layers: Vec<Layer>,
}

/// Saved activations of a training forward pass.
#[derive(Debug)]
pub struct Tape {
    inputs: Vec<Tensor>,
    block_caches: Vec<Option<RepBlockCache>>,
}

impl ModelGraph {
    /// Training graph with zero kernels and identity batch norms.
    pub fn skeleton(arch: Architecture, config: &RepCnnConfig) -> Result<Self> {
        config.validate()?;
        let c = config.width;
        let mut layers = vec![
            Layer::Conv(Conv1d::new(
                config.in_channels,
                c,
                config.stem_kernel,
                config.stem_stride,
                1,
                Padding::Causal,
                false,
            )?),
            Layer::BatchNorm(BatchNorm1d::new(c)),
            Layer::Activation(Activation::Relu),
        ];
        for &k in &config.stage_kernels {
            for _ in 0..config.blocks_per_stage {
                match arch {
                    Architecture::RepCnn => layers.push(Layer::RepBlock(RepConvBlock::new(c, k, config.num_branches)?)),
                    Architecture::SingleBranch => {
                        layers.push(Layer::Conv(Conv1d::depthwise(c, k, Padding::Causal, false)?));
                        layers.push(Layer::BatchNorm(BatchNorm1d::new(c)));
                        layers.push(Layer::Activation(Activation::Relu));
                    }
                }
            }
            layers.push(Layer::Conv(Conv1d::new(c, c, 1, 1, 1, Padding::Causal, false)?));
            layers.push(Layer::BatchNorm(BatchNorm1d::new(c)));
            layers.push(Layer::Activation(Activation::Relu));
        }
        layers.push(Layer::Conv(Conv1d::new(c, 1, 1, 1, 1, Padding::Causal, true)?));
        Ok(Self {
            arch,
            config: config.clone(),
            mode: GraphMode::Train,
            layers,
        })
    }

    /// Randomly initialized graph; every kernel gets an independent draw from a
    /// generator seeded with `seed`.
    pub fn build(arch: Architecture, config: &RepCnnConfig, seed: u64) -> Result<Self> {
        let mut g = Self::skeleton(arch, config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut g.layers {
            match layer {
                Layer::Conv(c) => c.init_uniform(&mut rng),
                Layer::RepBlock(b) => b.init_uniform(&mut rng),
                Layer::BatchNorm(_) | Layer::Activation(_) => {}
            }
        }
        Ok(g)
    }

    pub fn num_rep_blocks(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::RepBlock(_))).count()
    }

    pub fn count_layers(&self, kind: &str) -> usize {
        self.layers.iter().filter(|l| l.kind() == kind).count()
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        for layer in &mut self.layers {
            match layer {
                Layer::BatchNorm(b) => b.mode = mode,
                Layer::RepBlock(b) => b.set_mode(mode),
                _ => {}
            }
        }
    }

    /// Receptive field in input frames, derived from the layers themselves.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for layer in &self.layers {
            let (k, s) = match layer {
                Layer::Conv(c) => (c.kernel_size(), c.stride),
                Layer::RepBlock(b) => (b.kernel_size(), 1),
                _ => continue,
            };
            rf += (k - 1) * jump;
            jump *= s;
        }
        rf
    }

    /// Total stride from input frames to output frames.
    pub fn total_stride(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => c.stride,
                _ => 1,
            })
            .product()
    }

    /// Trainable scalars for training graphs, stored weights for fused graphs.
    /// Batch-norm running statistics are not counted.
    pub fn param_count(&self) -> usize {
        self.trainable_count()
    }

    pub fn output_len(&self, frames: usize) -> Result<usize> {
        let mut t = frames;
        for layer in &self.layers {
            if let Layer::Conv(c) = layer {
                t = c.output_len(t)?;
            }
        }
        Ok(t)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, _) = x.batch_dims()?;
        if c != self.config.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.config.in_channels,
                got: c,
            });
        }
        Ok(())
    }

    /// Inference with running statistics. Returns `(batch, 1, T_out)` logits
    /// (or `(1, T_out)` for an unbatched input).
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = self.layers[0].forward_eval(x)?;
        for layer in &self.layers[1..] {
            h = layer.forward_eval(&h)?;
        }
        Ok(h)
    }

    /// Forward pass in the batch norms' current mode, recording what
    /// [`ModelGraph::backward`] needs.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, Tape)> {
        if self.mode != GraphMode::Train {
            return Err(Error::GraphMode("cannot train a fused graph".into()));
        }
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut block_caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &mut self.layers {
            let (out, cache) = match layer {
                Layer::Conv(c) => (c.forward(&h)?, None),
                Layer::BatchNorm(b) => (b.forward(&h)?, None),
                Layer::Activation(a) => (a.forward(&h)?, None),
                Layer::RepBlock(b) => {
                    let (o, cache) = b.forward_cached(&h)?;
                    (o, Some(cache))
                }
            };
            inputs.push(std::mem::replace(&mut h, out));
            block_caches.push(cache);
        }
        Ok((h, Tape { inputs, block_caches }))
    }

    pub fn backward(&self, tape: &Tape, grad_out: &Tensor) -> Result<ParamGrads> {
        let mut grads = ParamGrads::new();
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &tape.inputs[i];
            let prefix = format!("layers.{i}");
            g = match layer {
                Layer::Conv(c) => {
                    let (gx, cg) = c.backward(x, &g)?;
                    cg.collect_into(&prefix, &mut grads)?;
                    gx
                }
                Layer::BatchNorm(b) => {
                    let (gx, bg) = b.backward(x, &g)?;
                    bg.collect_into(&prefix, &mut grads)?;
                    gx
                }
                Layer::Activation(a) => a.backward(x, &g)?,
                Layer::RepBlock(b) => {
                    let cache = tape.block_caches[i]
                        .as_ref()
                        .ok_or_else(|| Error::Shape("missing block cache".into()))?;
                    let (gx, bg) = b.backward_cached(x, cache, &g)?;
                    bg.collect_into(&prefix, &mut grads)?;
                    gx
                }
            };
        }
        Ok(grads)
    }

    /// Re-parameterized inference graph.
    pub fn fuse(&self) -> Result<ModelGraph> {
        crate::reparam::fuse_model(self)
    }
}

impl Parameterized for ModelGraph {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &Tensor)) {
        for (i, layer) in self.layers.iter().enumerate() {
            let p = join(prefix, &format!("layers.{i}"));
            match layer {
                Layer::Conv(c) => c.visit(&p, f),
                Layer::BatchNorm(b) => b.visit(&p, f),
                Layer::RepBlock(b) => b.visit(&p, f),
                Layer::Activation(_) => {}
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &format!("layers.{i}"));
            match layer {
                Layer::Conv(c) => c.visit_mut(&p, f),
                Layer::BatchNorm(b) => b.visit_mut(&p, f),
                Layer::RepBlock(b) => b.visit_mut(&p, f),
                Layer::Activation(_) => {}
            }
        }
    }
}

pub fn build_repcnn(config: &RepCnnConfig, seed: u64) -> Result<ModelGraph> {
    ModelGraph::build(Architecture::RepCnn, config, seed)
}

pub fn build_single_branch_baseline(config: &RepCnnConfig, seed: u64) -> Result<ModelGraph> {
    ModelGraph::build(Architecture::SingleBranch, config, seed)
}

pub fn receptive_field(config: &RepCnnConfig) -> usize {
    config.receptive_field()
}
