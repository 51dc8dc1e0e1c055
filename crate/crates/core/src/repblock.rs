//! Multi-branch depthwise block: `n` parallel k-tap depthwise convolutions
//! and one 1-tap depthwise path, each followed by its own batch norm, summed
//! and passed through a single activation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::params::join;
use crate::nn::{Activation, BatchNorm1d, BnGrads, BnMode, Conv1d, ConvGrads, Padding, ParamGrads, Parameterized, TensorRole};
use crate::tensor::Tensor;

/// A convolution followed by batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn {
    pub conv: Conv1d,
    pub bn: BatchNorm1d,
}

impl ConvBn {
    pub fn depthwise(channels: usize, kernel_size: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv1d::depthwise(channels, kernel_size, Padding::Causal, false)?,
            bn: BatchNorm1d::new(channels),
        })
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.bn.forward_eval(&self.conv.forward(x)?)
    }
}

impl Parameterized for ConvBn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &Tensor)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepConvBlock {
    /// The `n` k-tap paths.
    pub branches: Vec<ConvBn>,
    /// The 1-tap path standing in for a skip connection.
    pub one_by_one: ConvBn,
    pub activation: Activation,
}

/// Intermediate values of one forward pass, consumed by [`RepConvBlock::backward_cached`].
#[derive(Debug, Clone)]
pub struct RepBlockCache {
    /// Convolution outputs: the k-tap branches in order, then the 1-tap path.
    conv_outs: Vec<Tensor>,
    pre_activation: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepBlockGrads {
    pub branches: Vec<(ConvGrads, BnGrads)>,
    pub one_by_one: (ConvGrads, BnGrads),
}

impl RepConvBlock {
    /// Zero kernels, identity batch norms, ReLU.
    pub fn new(channels: usize, kernel_size: usize, num_branches: usize) -> Result<Self> {
        if num_branches == 0 {
            return Err(Error::InvalidConfig("a RepConvBlock needs at least one branch".into()));
        }
        Ok(Self {
            branches: (0..num_branches)
                .map(|_| ConvBn::depthwise(channels, kernel_size))
                .collect::<Result<_>>()?,
            one_by_one: ConvBn::depthwise(channels, 1)?,
            activation: Activation::Relu,
        })
    }

    /// Independent uniform fan-in draws for every kernel, branch order first.
    pub fn init_uniform<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for b in &mut self.branches {
            b.conv.init_uniform(rng);
        }
        self.one_by_one.conv.init_uniform(rng);
    }

    pub fn channels(&self) -> usize {
        self.one_by_one.conv.out_channels()
    }

    pub fn kernel_size(&self) -> usize {
        self.branches[0].conv.kernel_size()
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    fn paths(&self) -> impl Iterator<Item = &ConvBn> {
        self.branches.iter().chain(std::iter::once(&self.one_by_one))
    }

    fn paths_mut(&mut self) -> impl Iterator<Item = &mut ConvBn> {
        self.branches.iter_mut().chain(std::iter::once(&mut self.one_by_one))
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        for p in self.paths_mut() {
            p.bn.mode = mode;
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, _) = x.batch_dims()?;
        if c != self.channels() {
            return Err(Error::ChannelMismatch {
                expected: self.channels(),
                got: c,
            });
        }
        Ok(())
    }

    /// Pre-activation sum with running statistics.
    pub fn pre_activation_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut paths = self.paths();
        let mut sum = paths.next().expect("at least one path").forward_eval(x)?;
        for p in paths {
            sum.add_assign(&p.forward_eval(x)?)?;
        }
        Ok(sum)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.activation.forward(&self.pre_activation_eval(x)?)
    }

    /// Forward in the batch norms' current mode; train mode updates running statistics.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&mut self, x: &Tensor) -> Result<(Tensor, RepBlockCache)> {
        self.check_input(x)?;
        let mut conv_outs = Vec::with_capacity(self.branches.len() + 1);
        let mut sum: Option<Tensor> = None;
        for p in self.paths_mut() {
            let c = p.conv.forward(x)?;
            let y = p.bn.forward(&c)?;
            conv_outs.push(c);
            match &mut sum {
                Some(s) => s.add_assign(&y)?,
                None => sum = Some(y),
            }
        }
        let pre_activation = sum.expect("at least one path");
        let out = self.activation.forward(&pre_activation)?;
        Ok((
            out,
            RepBlockCache {
                conv_outs,
                pre_activation,
            },
        ))
    }

    pub fn backward_cached(
        &self,
        x: &Tensor,
        cache: &RepBlockCache,
        grad_out: &Tensor,
    ) -> Result<(Tensor, RepBlockGrads)> {
        let g_pre = self.activation.backward(&cache.pre_activation, grad_out)?;
        let mut grad_x: Option<Tensor> = None;
        let mut path_grads = Vec::with_capacity(cache.conv_outs.len());
        for (p, c) in self.paths().zip(&cache.conv_outs) {
            let (g_conv, bn_grads) = p.bn.backward(c, &g_pre)?;
            let (gx, conv_grads) = p.conv.backward(x, &g_conv)?;
            match &mut grad_x {
                Some(acc) => acc.add_assign(&gx)?,
                None => grad_x = Some(gx),
            }
            path_grads.push((conv_grads, bn_grads));
        }
        let one_by_one = path_grads.pop().expect("1-tap path");
        Ok((
            grad_x.expect("at least one path"),
            RepBlockGrads {
                branches: path_grads,
                one_by_one,
            },
        ))
    }

    /// Gradients for a forward pass from `x` in the current mode; recomputes
    /// the intermediates without touching running statistics.
    pub fn backward(&self, x: &Tensor, grad_out: &Tensor) -> Result<(Tensor, RepBlockGrads)> {
        self.check_input(x)?;
        let mut conv_outs = Vec::new();
        let mut sum: Option<Tensor> = None;
        for p in self.paths() {
            let c = p.conv.forward(x)?;
            let y = p.bn.forward_no_update(&c)?;
            conv_outs.push(c);
            match &mut sum {
                Some(s) => s.add_assign(&y)?,
                None => sum = Some(y),
            }
        }
        let cache = RepBlockCache {
            conv_outs,
            pre_activation: sum.expect("at least one path"),
        };
        self.backward_cached(x, &cache, grad_out)
    }

    pub fn fuse(&self) -> Result<(Conv1d, Activation)> {
        crate::reparam::fuse_repblock(self)
    }
}

impl RepBlockGrads {
    pub fn collect_into(self, prefix: &str, grads: &mut ParamGrads) -> Result<()> {
        for (i, (c, b)) in self.branches.into_iter().enumerate() {
            let p = join(prefix, &format!("branches.{i}"));
            c.collect_into(&join(&p, "conv"), grads)?;
            b.collect_into(&join(&p, "bn"), grads)?;
        }
        let p = join(prefix, "one_by_one");
        self.one_by_one.0.collect_into(&join(&p, "conv"), grads)?;
        self.one_by_one.1.collect_into(&join(&p, "bn"), grads)
    }
}

impl Parameterized for RepConvBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &Tensor)) {
        for (i, b) in self.branches.iter().enumerate() {
            b.visit(&join(prefix, &format!("branches.{i}")), f);
        }
        self.one_by_one.visit(&join(prefix, "one_by_one"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor)) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("branches.{i}")), f);
        }
        self.one_by_one.visit_mut(&join(prefix, "one_by_one"), f);
    }
}
