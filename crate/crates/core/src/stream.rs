//! Frame-at-a-time causal inference.
//!
//! Every convolution with `k > 1` keeps a ring of its last `k - 1` input
//! frames. Rings start out empty and taps that would read before the first
//! frame are skipped, which is exactly what causal zero padding does in the
//! batch path. Strided layers emit only on frames whose index is a multiple of
//! the stride, so the default model produces a score on input frames
//! 0, 2, 4, ... The per-output accumulation order is the same as
//! [`Conv1d::forward`], so streamed scores are bitwise equal to batch scores.

use crate::error::{Error, Result};
use crate::model::{GraphMode, Layer, ModelGraph};
use crate::nn::{Activation, BatchNorm1d, Conv1d, Padding};
use crate::repblock::ConvBn;
use crate::tensor::Tensor;

/// Bytes of the two stream counters (frames consumed, outputs emitted).
pub const COUNTER_BYTES: usize = 2 * std::mem::size_of::<u64>();

#[derive(Debug, Clone)]
struct Ring {
    channels: usize,
    slots: usize,
    data: Vec<f32>,
}

impl Ring {
    fn new(channels: usize, kernel: usize) -> Self {
        Self {
            channels,
            slots: kernel - 1,
            data: vec![0.0; channels * (kernel - 1)],
        }
    }

    fn frame(&self, index: u64) -> &[f32] {
        let slot = (index % self.slots as u64) as usize;
        &self.data[slot * self.channels..(slot + 1) * self.channels]
    }

    fn store(&mut self, index: u64, frame: &[f32]) {
        let slot = (index % self.slots as u64) as usize;
        self.data[slot * self.channels..(slot + 1) * self.channels].copy_from_slice(frame);
    }

    fn bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }

    fn clear(&mut self) {
        self.data.fill(0.0);
    }
}

#[derive(Debug, Clone)]
struct ConvStep {
    conv: Conv1d,
    ring: Option<Ring>,
}

impl ConvStep {
    fn new(conv: &Conv1d) -> Result<Self> {
        if conv.kernel_size() > 1 && conv.padding != Padding::Causal {
            return Err(Error::GraphMode(format!(
                "streaming needs causal convolutions, found {:?} padding",
                conv.padding
            )));
        }
        let k = conv.kernel_size();
        Ok(Self {
            conv: conv.clone(),
            ring: (k > 1).then(|| Ring::new(conv.in_channels(), k)),
        })
    }

    /// Output for input frame `index` if the stride phase allows one.
    /// Does not store `x`; call [`ConvStep::remember`] afterwards.
    fn output(&self, x: &[f32], index: u64) -> Option<Vec<f32>> {
        let s = self.conv.stride as u64;
        if index % s != 0 {
            return None;
        }
        let k = self.conv.kernel_size();
        let out_ch = self.conv.out_channels();
        let in_per_group = self.conv.weight.shape()[1];
        let out_per_group = out_ch / self.conv.groups;
        let w = self.conv.weight.data();
        let first_tap = (k as u64 - 1).saturating_sub(index) as usize;
        let mut out = vec![0.0f32; out_ch];
        for (o, y) in out.iter_mut().enumerate() {
            if let Some(b) = &self.conv.bias {
                *y = b.data()[o];
            }
            let g = o / out_per_group;
            for ci in 0..in_per_group {
                let ch = g * in_per_group + ci;
                let wrow = &w[(o * in_per_group + ci) * k..(o * in_per_group + ci + 1) * k];
                for (j, &wv) in wrow.iter().enumerate().skip(first_tap) {
                    let v = if j == k - 1 {
                        x[ch]
                    } else {
                        let ring = self.ring.as_ref().expect("k > 1 has a ring");
                        ring.frame(index + j as u64 + 1 - k as u64)[ch]
                    };
                    *y += wv * v;
                }
            }
        }
        Some(out)
    }

    fn remember(&mut self, x: &[f32], index: u64) {
        if let Some(r) = &mut self.ring {
            r.store(index, x);
        }
    }
}

/// Inference batch norm as the per-channel affine map the batch path applies.
#[derive(Debug, Clone)]
struct Affine {
    scale: Vec<f32>,
    shift: Vec<f32>,
}

impl Affine {
    fn new(bn: &BatchNorm1d) -> Result<Self> {
        bn.ensure_eval_ready()?;
        let inv_std: Vec<f32> = bn.running_std().iter().map(|s| 1.0 / s).collect();
        let scale: Vec<f32> = (0..bn.channels()).map(|c| bn.weight.data()[c] * inv_std[c]).collect();
        let shift = (0..bn.channels())
            .map(|c| bn.bias.data()[c] - scale[c] * bn.running_mean.data()[c])
            .collect();
        Ok(Self { scale, shift })
    }

    fn apply(&self, x: &mut [f32]) {
        for ((v, s), b) in x.iter_mut().zip(&self.scale).zip(&self.shift) {
            *v = *v * s + b;
        }
    }
}

#[derive(Debug, Clone)]
enum Step {
    Conv(ConvStep),
    Affine(Affine),
    Act(Activation),
    Block {
        paths: Vec<(ConvStep, Affine)>,
        activation: Activation,
    },
}

fn path(p: &ConvBn) -> Result<(ConvStep, Affine)> {
    Ok((ConvStep::new(&p.conv)?, Affine::new(&p.bn)?))
}

/// Streaming state for one audio stream.
#[derive(Debug, Clone)]
pub struct Streamer {
    steps: Vec<Step>,
    in_channels: usize,
    consumed: u64,
    emitted: u64,
}

impl Streamer {
    /// Engine over a fused graph.
    pub fn new(graph: &ModelGraph) -> Result<Self> {
        if graph.mode != GraphMode::Fused {
            return Err(Error::GraphMode("the streaming engine runs fused graphs only".into()));
        }
        Self::build(graph)
    }

    /// Engine over an unfused training graph, evaluated with running
    /// statistics and one ring per branch. Used to benchmark the cost of
    /// skipping re-parameterization.
    pub fn new_training_graph(graph: &ModelGraph) -> Result<Self> {
        if graph.mode != GraphMode::Train {
            return Err(Error::GraphMode("expected a training graph".into()));
        }
        Self::build(graph)
    }

    fn build(graph: &ModelGraph) -> Result<Self> {
        let steps = graph
            .layers
            .iter()
            .map(|l| {
                Ok(match l {
                    Layer::Conv(c) => Step::Conv(ConvStep::new(c)?),
                    Layer::BatchNorm(b) => Step::Affine(Affine::new(b)?),
                    Layer::Activation(a) => Step::Act(*a),
                    Layer::RepBlock(b) => Step::Block {
                        paths: b
                            .branches
                            .iter()
                            .chain(std::iter::once(&b.one_by_one))
                            .map(path)
                            .collect::<Result<_>>()?,
                        activation: b.activation,
                    },
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            steps,
            in_channels: graph.config.in_channels,
            consumed: 0,
            emitted: 0,
        })
    }

    /// Feeds one frame of `in_channels` coefficients; returns a logit when the
    /// frame completes an output step.
    pub fn push(&mut self, frame: &[f32]) -> Result<Option<f32>> {
        if frame.len() != self.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.in_channels,
                got: frame.len(),
            });
        }
        let mut h = frame.to_vec();
        let mut index = self.consumed;
        self.consumed += 1;
        for step in &mut self.steps {
            match step {
                Step::Conv(c) => {
                    let out = c.output(&h, index);
                    c.remember(&h, index);
                    match out {
                        Some(o) => {
                            h = o;
                            index /= c.conv.stride as u64;
                        }
                        None => return Ok(None),
                    }
                }
                Step::Affine(a) => a.apply(&mut h),
                Step::Act(a) => h.iter_mut().for_each(|v| *v = a.apply(*v)),
                Step::Block { paths, activation } => {
                    let mut sum: Option<Vec<f32>> = None;
                    for (c, a) in paths.iter_mut() {
                        let mut y = c.output(&h, index).expect("stride-1 branch");
                        c.remember(&h, index);
                        a.apply(&mut y);
                        match &mut sum {
                            Some(s) => s.iter_mut().zip(&y).for_each(|(s, v)| *s += v),
                            None => sum = Some(y),
                        }
                    }
                    h = sum.expect("at least one path");
                    h.iter_mut().for_each(|v| *v = activation.apply(*v));
                }
            }
        }
        if h.len() != 1 {
            return Err(Error::Shape(format!("graph emits {} channels, expected 1", h.len())));
        }
        self.emitted += 1;
        Ok(Some(h[0]))
    }

    /// Pushes every frame of a `(channels, T)` tensor and collects the outputs.
    pub fn push_frames(&mut self, frames: &Tensor) -> Result<Vec<f32>> {
        let [c, t] = *frames.shape() else {
            return Err(Error::Shape(format!("expected (channels, T) frames, got {:?}", frames.shape())));
        };
        if c != self.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.in_channels,
                got: c,
            });
        }
        let d = frames.data();
        let mut out = Vec::new();
        let mut frame = vec![0.0f32; c];
        for i in 0..t {
            for (ch, v) in frame.iter_mut().enumerate() {
                *v = d[ch * t + i];
            }
            if let Some(y) = self.push(&frame)? {
                out.push(y);
            }
        }
        Ok(out)
    }

    /// Back to the freshly initialized state.
    pub fn reset(&mut self) {
        for step in &mut self.steps {
            match step {
                Step::Conv(c) => {
                    if let Some(r) = &mut c.ring {
                        r.clear();
                    }
                }
                Step::Block { paths, .. } => {
                    for (c, _) in paths.iter_mut() {
                        if let Some(r) = &mut c.ring {
                            r.clear();
                        }
                    }
                }
                Step::Affine(_) | Step::Act(_) => {}
            }
        }
        self.consumed = 0;
        self.emitted = 0;
    }

    fn rings(&self) -> impl Iterator<Item = &Ring> {
        self.steps.iter().flat_map(|s| -> Box<dyn Iterator<Item = &Ring>> {
            match s {
                Step::Conv(c) => Box::new(c.ring.iter()),
                Step::Block { paths, .. } => Box::new(paths.iter().filter_map(|(c, _)| c.ring.as_ref())),
                Step::Affine(_) | Step::Act(_) => Box::new(std::iter::empty()),
            }
        })
    }

    pub fn num_rings(&self) -> usize {
        self.rings().count()
    }

    /// Ring capacities in frames, in layer order.
    pub fn ring_capacities(&self) -> Vec<usize> {
        self.rings().map(|r| r.slots).collect()
    }

    /// Mutable stream state: `sum C * (k - 1) * 4` ring bytes plus the counters.
    pub fn state_bytes(&self) -> usize {
        self.rings().map(Ring::bytes).sum::<usize>() + COUNTER_BYTES
    }

    pub fn frames_consumed(&self) -> u64 {
        self.consumed
    }

    pub fn outputs_emitted(&self) -> u64 {
        self.emitted
    }

    /// Ring contents and counters, for comparing states.
    pub fn snapshot(&self) -> (Vec<f32>, u64, u64) {
        let data = self.rings().flat_map(|r| r.data.iter().copied()).collect();
        (data, self.consumed, self.emitted)
    }
}

/// Streamed logits for a whole `(channels, T)` sequence from a fresh state.
pub fn stream_sequence(graph: &ModelGraph, frames: &Tensor) -> Result<Vec<f32>> {
    Streamer::new(graph)?.push_frames(frames)
}
