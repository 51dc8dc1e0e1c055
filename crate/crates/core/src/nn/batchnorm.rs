//! Per-channel batch normalization over `(batch, time)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f32 = 1e-5;
pub const DEFAULT_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates only.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm1d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
    pub momentum: f32,
    pub mode: BnMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Per-channel mean and inverse standard deviation used by one forward pass.
struct Stats {
    mean: Vec<f32>,
    inv_std: Vec<f32>,
}

impl BatchNorm1d {
    /// Identity-initialized layer: weight 1, bias 0, mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        Self {
            weight: Tensor::full(&[channels], 1.0),
            bias: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
            mode: BnMode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.numel()
    }

    /// `sqrt(running_var + eps)` per channel.
    pub fn running_std(&self) -> Vec<f32> {
        self.running_var
            .data()
            .iter()
            .map(|v| (v + self.eps).sqrt())
            .collect()
    }

    /// Checks that the running statistics can be used for inference.
    pub fn ensure_eval_ready(&self) -> Result<()> {
        let mean_ok = self.running_mean.data().iter().all(|v| v.is_finite());
        let var_ok = self
            .running_var
            .data()
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0 && *v + self.eps > 0.0);
        if mean_ok && var_ok && self.running_mean.numel() == self.channels() && self.running_var.numel() == self.channels()
        {
            Ok(())
        } else {
            Err(Error::UninitializedStats(
                "running mean/variance must be finite with variance >= 0".into(),
            ))
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (n, c, t) = x.batch_dims()?;
        if c != self.channels() {
            return Err(Error::ChannelMismatch {
                expected: self.channels(),
                got: c,
            });
        }
        Ok((n, c, t))
    }

    fn batch_stats(x: &Tensor, n: usize, c: usize, t: usize) -> (Vec<f64>, Vec<f64>) {
        let xd = x.data();
        let count = (n * t) as f64;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for ch in 0..c {
            let rows = || (0..n).map(|b| &xd[(b * c + ch) * t..(b * c + ch + 1) * t]);
            let m = rows().map(|r| lane_sum(r, |v| v)).sum::<f64>() / count;
            let ss: f64 = rows().map(|r| lane_sum(r, |v| (v - m) * (v - m))).sum();
            mean[ch] = m;
            var[ch] = ss / count;
        }
        (mean, var)
    }

    fn stats_for(&self, x: &Tensor, n: usize, c: usize, t: usize) -> Result<Stats> {
        Ok(self.stats_and_moments(x, n, c, t)?.0)
    }

    /// Normalization statistics plus, in train mode, the raw batch moments.
    #[allow(clippy::type_complexity)]
    fn stats_and_moments(
        &self,
        x: &Tensor,
        n: usize,
        c: usize,
        t: usize,
    ) -> Result<(Stats, Option<(Vec<f64>, Vec<f64>)>)> {
        match self.mode {
            BnMode::Train => {
                if n * t < 2 {
                    return Err(Error::Shape(format!(
                        "train-mode batch norm needs at least 2 values per channel, got {}",
                        n * t
                    )));
                }
                let (mean, var) = Self::batch_stats(x, n, c, t);
                let stats = Stats {
                    mean: mean.iter().map(|&m| m as f32).collect(),
                    inv_std: var
                        .iter()
                        .map(|&v| (1.0 / (v + self.eps as f64).sqrt()) as f32)
                        .collect(),
                };
                Ok((stats, Some((mean, var))))
            }
            BnMode::Eval => Ok((
                Stats {
                    mean: self.running_mean.data().to_vec(),
                    inv_std: self.running_std().iter().map(|s| 1.0 / s).collect(),
                },
                None,
            )),
        }
    }

    fn normalize(&self, x: &Tensor, stats: &Stats, n: usize, c: usize, t: usize) -> Result<Tensor> {
        let mut out = x.data().to_vec();
        for b in 0..n {
            for ch in 0..c {
                let scale = self.weight.data()[ch] * stats.inv_std[ch];
                let shift = self.bias.data()[ch] - scale * stats.mean[ch];
                for v in &mut out[(b * c + ch) * t..(b * c + ch + 1) * t] {
                    *v = *v * scale + shift;
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out)?.ensure_finite("batchnorm forward")
    }

    /// Forward pass. In train mode the running statistics are updated with
    /// `running = (1 - momentum) * running + momentum * batch` (unbiased variance).
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (n, c, t) = self.check_input(x)?;
        let (stats, moments) = self.stats_and_moments(x, n, c, t)?;
        let out = self.normalize(x, &stats, n, c, t)?;
        if let Some((mean, var)) = moments {
            let count = (n * t) as f64;
            let m = self.momentum;
            for ch in 0..c {
                let unbiased = (var[ch] * count / (count - 1.0)) as f32;
                let rm = &mut self.running_mean.data_mut()[ch];
                *rm = (1.0 - m) * *rm + m * mean[ch] as f32;
                let rv = &mut self.running_var.data_mut()[ch];
                *rv = (1.0 - m) * *rv + m * unbiased;
            }
        }
        Ok(out)
    }

    /// Forward pass that never touches the running statistics: batch statistics
    /// in train mode, running statistics in eval mode.
    pub fn forward_no_update(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, t) = self.check_input(x)?;
        let stats = self.stats_for(x, n, c, t)?;
        self.normalize(x, &stats, n, c, t)
    }

    /// Inference forward with running statistics, whatever `mode` says.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, t) = self.check_input(x)?;
        let stats = Stats {
            mean: self.running_mean.data().to_vec(),
            inv_std: self.running_std().iter().map(|s| 1.0 / s).collect(),
        };
        self.normalize(x, &stats, n, c, t)
    }

    /// Gradients for the forward pass that produced the output from `x` in the
    /// current mode. Train mode differentiates through the batch statistics.
    pub fn backward(&self, x: &Tensor, grad_out: &Tensor) -> Result<(Tensor, BnGrads)> {
        let (n, c, t) = self.check_input(x)?;
        if grad_out.shape() != x.shape() {
            return Err(Error::Shape(format!(
                "grad_out shape {:?} does not match input {:?}",
                grad_out.shape(),
                x.shape()
            )));
        }
        let stats = self.stats_for(x, n, c, t)?;
        let xd = x.data();
        let gd = grad_out.data();
        let mut gx = vec![0.0f32; xd.len()];
        let mut gw = vec![0.0f32; c];
        let mut gb = vec![0.0f32; c];
        let count = (n * t) as f64;
        for ch in 0..c {
            let mean = stats.mean[ch];
            let inv_std = stats.inv_std[ch];
            let mut sum_g = 0.0f64;
            let mut sum_gx = 0.0f64;
            for b in 0..n {
                let r = (b * c + ch) * t..(b * c + ch + 1) * t;
                sum_g += lane_sum(&gd[r.clone()], |v| v);
                sum_gx += lane_dot(&gd[r.clone()], &xd[r], |v| ((v - mean) * inv_std) as f64);
            }
            gw[ch] = sum_gx as f32;
            gb[ch] = sum_g as f32;
            let gamma = self.weight.data()[ch];
            match self.mode {
                BnMode::Train => {
                    let mean_g = (sum_g / count) as f32;
                    let mean_gx = (sum_gx / count) as f32;
                    for b in 0..n {
                        let r = (b * c + ch) * t..(b * c + ch + 1) * t;
                        for ((o, &g), &xv) in gx[r.clone()].iter_mut().zip(&gd[r.clone()]).zip(&xd[r]) {
                            let xhat = (xv - mean) * inv_std;
                            *o = gamma * inv_std * (g - mean_g - xhat * mean_gx);
                        }
                    }
                }
                BnMode::Eval => {
                    let scale = gamma * inv_std;
                    for b in 0..n {
                        let r = (b * c + ch) * t..(b * c + ch + 1) * t;
                        for (o, &g) in gx[r.clone()].iter_mut().zip(&gd[r]) {
                            *o = g * scale;
                        }
                    }
                }
            }
        }
        let grad_x = Tensor::new(x.shape().to_vec(), gx)?.ensure_finite("batchnorm backward")?;
        Ok((
            grad_x,
            BnGrads {
                weight: Tensor::from_vec(gw),
                bias: Tensor::from_vec(gb),
            },
        ))
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// `sum f(x_i)` in f64 with four independent partial sums.
fn lane_sum(x: &[f32], f: impl Fn(f64) -> f64) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = x.chunks_exact(4);
    let tail: f64 = chunks.remainder().iter().map(|&v| f(v as f64)).sum();
    for c in chunks {
        for l in 0..4 {
            acc[l] += f(c[l] as f64);
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// `sum g_i * f(x_i)` in f64 with four independent partial sums.
fn lane_dot(g: &[f32], x: &[f32], f: impl Fn(f32) -> f64) -> f64 {
    let mut acc = [0.0f64; 4];
    let cg = g.chunks_exact(4);
    let cx = x.chunks_exact(4);
    let tail: f64 = cg.remainder().iter().zip(cx.remainder()).map(|(&a, &b)| a as f64 * f(b)).sum();
    for (a, b) in cg.zip(cx) {
        for l in 0..4 {
            acc[l] += a[l] as f64 * f(b[l]);
        }
    }
    acc.iter().sum::<f64>() + tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_bn(alpha: f32, beta: f32, mu: f32, var: f32, eps: f32) -> BatchNorm1d {
        let mut bn = BatchNorm1d::new(1);
        bn.weight = Tensor::from_vec(vec![alpha]);
        bn.bias = Tensor::from_vec(vec![beta]);
        bn.running_mean = Tensor::from_vec(vec![mu]);
        bn.running_var = Tensor::from_vec(vec![var]);
        bn.eps = eps;
        bn.mode = BnMode::Eval;
        bn
    }

    #[test]
    fn eval_identity() {
        let mut bn = scalar_bn(1.0, 0.0, 0.0, 1.0, 0.0);
        let x = Tensor::new(vec![1, 4], vec![-1.0, 0.5, 2.0, 7.0]).unwrap();
        assert_eq!(bn.forward(&x).unwrap(), x);
    }

    #[test]
    fn eval_hand_algebra() {
        let mut bn = scalar_bn(2.0, 1.0, 3.0, 4.0, 0.0);
        let x = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        assert_eq!(bn.forward(&x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn train_mode_output_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, c, t) = (8, 3, 50);
        let mut bn = BatchNorm1d::new(c);
        bn.weight = Tensor::from_vec(vec![0.5, 2.0, 1.5]);
        bn.bias = Tensor::from_vec(vec![-1.0, 0.0, 3.0]);
        bn.eps = 0.0;
        let x = Tensor::new(
            vec![n, c, t],
            (0..n * c * t).map(|_| rng.gen_range(-4.0..9.0)).collect(),
        )
        .unwrap();
        let y = bn.forward(&x).unwrap();
        for ch in 0..c {
            let vals: Vec<f64> = (0..n)
                .flat_map(|b| y.data()[(b * c + ch) * t..(b * c + ch + 1) * t].iter().map(|&v| v as f64))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!((mean - bn.bias.data()[ch] as f64).abs() < 1e-4, "mean {mean}");
            assert!((std - bn.weight.data()[ch] as f64).abs() < 1e-4, "std {std}");
        }
        // running stats moved toward the batch stats
        assert!(bn.running_mean.data().iter().all(|&m| m != 0.0));
    }

    #[test]
    fn train_mode_needs_two_values() {
        let mut bn = BatchNorm1d::new(2);
        assert!(bn.forward(&Tensor::zeros(&[2, 1])).is_err());
        assert!(bn.forward(&Tensor::zeros(&[3, 4])).is_err());
    }

    #[test]
    fn eval_backward_single_element() {
        let bn = scalar_bn(2.0, 1.0, 0.5, 3.0, 1e-5);
        let x = Tensor::new(vec![1, 1], vec![0.7]).unwrap();
        let go = Tensor::new(vec![1, 1], vec![1.3]).unwrap();
        let (gx, _) = bn.backward(&x, &go).unwrap();
        let sigma = (3.0f32 + 1e-5).sqrt();
        assert!((gx.data()[0] - 1.3 * 2.0 / sigma).abs() < 1e-6);
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let bn = BatchNorm1d::new(2);
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 4.0, -1.0, 0.0, 3.0]).unwrap();
        let (gx, g) = bn.backward(&x, &Tensor::zeros(&[2, 3])).unwrap();
        assert!(gx.data().iter().chain(g.weight.data()).chain(g.bias.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn eval_is_invertible_affine_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bn = scalar_bn(1.7, -0.4, 0.9, 2.5, 1e-5);
        let x: Vec<f32> = (0..64).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let y = bn.forward_eval(&Tensor::new(vec![1, 64], x.clone()).unwrap()).unwrap();
        // inverse: x = (y - beta) * sigma / alpha + mu
        let sigma = (2.5f32 + 1e-5).sqrt();
        for (xi, yi) in x.iter().zip(y.data()) {
            let back = (yi - -0.4) * sigma / 1.7 + 0.9;
            assert!((back - xi).abs() < 1e-5);
        }
    }

    #[test]
    fn stats_readiness() {
        let mut bn = BatchNorm1d::new(2);
        assert!(bn.ensure_eval_ready().is_ok());
        bn.running_var.data_mut()[1] = f32::NAN;
        assert!(matches!(bn.ensure_eval_ready(), Err(Error::UninitializedStats(_))));
    }
}
