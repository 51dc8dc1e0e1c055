//! Latency and activation-memory benchmark for training versus fused graphs.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GraphMode, Layer, ModelGraph};
use crate::nn::{Parameterized, TensorRole};
use crate::stream::Streamer;
use crate::tensor::Tensor;

const F32: usize = std::mem::size_of::<f32>();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Timed streaming outputs per graph (after warmup).
    pub iterations: usize,
    pub warmup: usize,
    /// Timed whole-window forward passes per graph.
    pub window_iterations: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            warmup: 100,
            window_iterations: 30,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub graph: String,
    /// Streaming wall time per emitted output, microseconds.
    pub stream_median_us: f64,
    pub stream_mean_us: f64,
    /// Forward pass over one receptive-field window, microseconds.
    pub window_median_us: f64,
    pub window_mean_us: f64,
    pub peak_activation_bytes: usize,
    pub largest_buffer_bytes: usize,
    pub param_bytes: usize,
    pub stream_state_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, graph: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.graph == graph)
    }

    /// CSV with one row per graph.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(|e| Error::Data(e.to_string()))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Peak and largest live buffer sizes for a graph run on `frames` input
/// frames, assuming every node writes a fresh buffer that is freed once its
/// last consumer has run. Inside a block every branch output stays live until
/// the branches are summed.
pub fn analytic_peak_bytes(graph: &ModelGraph, frames: usize) -> Result<(usize, usize)> {
    let mut t = frames;
    let mut current = graph.config.in_channels * t * F32;
    let (mut peak, mut largest) = (current, current);
    let mut note = |live: usize, buf: usize| {
        peak = peak.max(live);
        largest = largest.max(buf);
    };
    for layer in &graph.layers {
        match layer {
            Layer::Conv(c) => {
                t = c.output_len(t)?;
                let out = c.out_channels() * t * F32;
                note(current + out, out);
                current = out;
            }
            Layer::BatchNorm(_) | Layer::Activation(_) => {
                note(2 * current, current);
            }
            Layer::RepBlock(b) => {
                let buf = b.channels() * t * F32;
                let paths = b.num_branches() + 1;
                for p in 0..paths {
                    // conv output and its batch-norm output, next to finished paths
                    note(current + p * buf + 2 * buf, buf);
                }
                note(current + paths * buf + buf, buf);
                note(2 * buf, buf);
                current = buf;
            }
        }
    }
    Ok((peak, largest))
}

/// Bytes of every stored tensor, running statistics included.
pub fn param_bytes(graph: &ModelGraph) -> usize {
    let mut n = 0;
    graph.visit("", &mut |_, _role: TensorRole, t: &Tensor| n += t.numel());
    n * F32
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn bench_graph(name: &str, graph: &ModelGraph, input_seconds: f64, cfg: &BenchConfig) -> Result<BenchRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = graph.config.in_channels;
    let stride = graph.total_stride();
    let input_frames = ((input_seconds * 100.0).round() as usize).max(1);
    let total = cfg.warmup + cfg.iterations.max(input_frames.div_ceil(stride));
    let frames: Vec<Vec<f32>> = (0..total * stride)
        .map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();

    let mut streamer = match graph.mode {
        GraphMode::Fused => Streamer::new(graph)?,
        GraphMode::Train => Streamer::new_training_graph(graph)?,
    };
    let mut times = Vec::with_capacity(total);
    let mut sink = 0f32;
    for chunk in frames.chunks(stride) {
        let start = Instant::now();
        for f in chunk {
            if let Some(y) = streamer.push(f)? {
                sink += y;
            }
        }
        times.push(start.elapsed().as_secs_f64() * 1e6);
    }
    let timed = times.split_off(cfg.warmup.min(times.len()));

    let rf = graph.receptive_field();
    let window = Tensor::new(
        vec![c, rf],
        (0..c * rf).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    )?;
    let mut wtimes = Vec::with_capacity(cfg.window_iterations);
    for i in 0..cfg.window_iterations + 2 {
        let start = Instant::now();
        let y = graph.forward_eval(&window)?;
        let dt = start.elapsed().as_secs_f64() * 1e6;
        sink += y.data()[0];
        if i >= 2 {
            wtimes.push(dt);
        }
    }
    std::hint::black_box(sink);

    let (peak, largest) = analytic_peak_bytes(graph, rf)?;
    Ok(BenchRow {
        graph: name.to_string(),
        stream_median_us: median(&mut timed.clone()),
        stream_mean_us: mean(&timed),
        window_median_us: median(&mut wtimes.clone()),
        window_mean_us: mean(&wtimes),
        peak_activation_bytes: peak,
        largest_buffer_bytes: largest,
        param_bytes: param_bytes(graph),
        stream_state_bytes: streamer.state_bytes(),
    })
}

/// Benchmarks a training graph against its fused counterpart, single-threaded.
pub fn bench(graph_train: &ModelGraph, graph_fused: &ModelGraph, input_seconds: f64, cfg: &BenchConfig) -> Result<BenchReport> {
    if graph_train.mode != GraphMode::Train || graph_fused.mode != GraphMode::Fused {
        return Err(Error::GraphMode("bench expects a training graph and a fused graph".into()));
    }
    if cfg.iterations == 0 || cfg.window_iterations == 0 {
        return Err(Error::InvalidConfig("bench iterations must be positive".into()));
    }
    Ok(BenchReport {
        rows: vec![
            bench_graph("train", graph_train, input_seconds, cfg)?,
            bench_graph("fused", graph_fused, input_seconds, cfg)?,
        ],
    })
}
