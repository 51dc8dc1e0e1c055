#![allow(dead_code)]

pub mod grad_cases;
pub mod metric_cases;
pub mod mfcc_ref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use repcnn::nn::{ParamGrads, Parameterized, TensorRole};
use repcnn::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

pub fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Trainable tensors in visit order: `(name, numel)` and the flattened values.
pub fn params_of(m: &impl Parameterized) -> (Vec<(String, usize)>, Vec<f32>) {
    let mut names = Vec::new();
    let mut flat = Vec::new();
    m.visit("", &mut |name, role, t| {
        if role == TensorRole::Param {
            names.push((name.to_string(), t.numel()));
            flat.extend_from_slice(t.data());
        }
    });
    (names, flat)
}

pub fn set_params(m: &mut impl Parameterized, flat: &[f32]) {
    let mut pos = 0;
    m.visit_mut("", &mut |_, role, t| {
        if role == TensorRole::Param {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
    });
    assert_eq!(pos, flat.len());
}

/// Gradients laid out like [`params_of`]; missing entries are an error.
pub fn flat_grads(names: &[(String, usize)], grads: &ParamGrads) -> Vec<f32> {
    names
        .iter()
        .flat_map(|(n, _)| {
            grads
                .get(n)
                .unwrap_or_else(|| panic!("no gradient for {n}"))
                .data()
                .to_vec()
        })
        .collect()
}

/// `sum(r * y)` accumulated in f64, the scalar probed by the gradient checks.
pub fn project(y: &Tensor, r: &Tensor) -> f64 {
    assert_eq!(y.shape(), r.shape());
    y.data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Largest deviation relative to the reference's largest magnitude.
pub fn max_rel_diff(reference: &[f32], other: &[f32]) -> f32 {
    let scale = reference.iter().map(|v| v.abs()).fold(0.0f32, f32::max).max(1e-12);
    max_abs_diff(reference, other) / scale
}

/// Finite-difference check over all tensors at once, scored like
/// [`repcnn::nn::gradcheck::relative_error`]; returns the tensor holding the
/// worst coordinate and that coordinate's error.
pub fn check_params<F>(names: &[(String, usize)], point: &[f32], analytic: &[f32], step: f32, mut f: F) -> (String, f64)
where
    F: FnMut(&[f32]) -> f64,
{
    let numeric = repcnn::nn::gradcheck::numeric_gradient(point, step, &mut f);
    let scale = analytic
        .iter()
        .map(|&v| (v as f64).abs())
        .chain(numeric.iter().map(|v| v.abs()))
        .fold(0.0f64, f64::max);
    let floor = (0.1 * scale).max(1e-12);
    let (worst_at, err) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| (a as f64 - n).abs() / (a as f64).abs().max(n.abs()).max(floor))
        .enumerate()
        .fold((0, 0.0f64), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    let mut pos = 0;
    for (name, n) in names {
        if worst_at < pos + n {
            return (name.clone(), err);
        }
        pos += n;
    }
    (String::new(), err)
}

pub fn randomize_bn(bn: &mut repcnn::nn::BatchNorm1d, rng: &mut impl Rng) {
    let c = bn.channels();
    bn.weight = uniform(&[c], 0.5, 1.5, rng);
    bn.bias = uniform(&[c], -0.5, 0.5, rng);
    bn.running_mean = uniform(&[c], -0.3, 0.3, rng);
    bn.running_var = uniform(&[c], 0.5, 2.0, rng);
}

pub fn randomize_block_bns(block: &mut repcnn::repblock::RepConvBlock, rng: &mut impl Rng) {
    for p in block.branches.iter_mut().chain(std::iter::once(&mut block.one_by_one)) {
        randomize_bn(&mut p.bn, rng);
    }
}

/// Gives every batch norm in the graph random affine parameters and running
/// statistics, as if it had been trained.
pub fn randomize_graph_bns(graph: &mut repcnn::ModelGraph, rng: &mut impl Rng) {
    for layer in &mut graph.layers {
        match layer {
            repcnn::Layer::BatchNorm(bn) => randomize_bn(bn, rng),
            repcnn::Layer::RepBlock(b) => randomize_block_bns(b, rng),
            _ => {}
        }
    }
}

/// Worst per-input relative deviation between two `(batch, channels, time)`
/// outputs: max |a - b| over an input divided by max |a| over that input.
pub fn worst_rel_per_input(reference: &Tensor, other: &Tensor) -> f32 {
    assert_eq!(reference.shape(), other.shape());
    let per = reference.numel() / reference.shape()[0];
    reference
        .data()
        .chunks(per)
        .zip(other.data().chunks(per))
        .map(|(a, b)| max_rel_diff(a, b))
        .fold(0.0, f32::max)
}

/// One cell of the fusion matrix: a lone block (`full == false`) or a whole
/// RepCNN with every stage kernel set to `k`, checked on `inputs` random inputs.
/// Returns the worst per-input relative deviation of the eval outputs.
pub fn fusion_case(c: usize, k: usize, n: usize, full: bool, inputs: usize, seed: u64) -> f32 {
    use repcnn::model::{Architecture, RepCnnConfig};
    use repcnn::repblock::RepConvBlock;
    let mut r = rng(seed);
    if full {
        let cfg = RepCnnConfig {
            width: c,
            stage_kernels: vec![k; 4],
            num_branches: n,
            ..RepCnnConfig::default()
        };
        let mut g = repcnn::ModelGraph::build(Architecture::RepCnn, &cfg, seed).unwrap();
        randomize_graph_bns(&mut g, &mut r);
        let fused = g.fuse().unwrap();
        let x = randn(&[inputs, cfg.in_channels, 64], &mut r);
        worst_rel_per_input(&g.forward_eval(&x).unwrap(), &fused.forward_eval(&x).unwrap())
    } else {
        let mut block = RepConvBlock::new(c, k, n).unwrap();
        block.init_uniform(&mut r);
        randomize_block_bns(&mut block, &mut r);
        let (conv, act) = block.fuse().unwrap();
        let x = randn(&[inputs, c, 32], &mut r);
        let pre = worst_rel_per_input(&block.pre_activation_eval(&x).unwrap(), &conv.forward(&x).unwrap());
        let post = worst_rel_per_input(
            &block.forward_eval(&x).unwrap(),
            &act.forward(&conv.forward(&x).unwrap()).unwrap(),
        );
        pre.max(post)
    }
}

/// Input frames that reach the last output of the default single-branch
/// model. Positive kernels with zero biases and means map silence to exactly
/// 0 and keep an impulse positive through every ReLU.
pub fn impulse_reach(frames: usize) -> Vec<usize> {
    use repcnn::model::{Architecture, RepCnnConfig};
    let cfg = RepCnnConfig {
        width: 2,
        ..RepCnnConfig::default()
    };
    let mut g = repcnn::ModelGraph::build(Architecture::SingleBranch, &cfg, 1).unwrap();
    g.visit_mut("", &mut |name, _, t| {
        let zero = name.ends_with("running_mean") || name.ends_with("bias");
        t.data_mut().iter_mut().for_each(|v| *v = if zero { 0.0 } else { v.abs() + 0.1 });
    });
    let fused = g.fuse().unwrap();
    let silent = fused.forward_eval(&Tensor::zeros(&[16, frames])).unwrap();
    assert!(silent.data().iter().all(|&v| v == 0.0));
    (0..frames)
        .filter(|&s| {
            let mut x = Tensor::zeros(&[16, frames]);
            x.data_mut()[s] = 1.0;
            *fused.forward_eval(&x).unwrap().data().last().unwrap() > 0.0
        })
        .collect()
}
