//! Grouped 1-D convolution with causal, symmetric or no padding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Temporal padding scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// `k - 1` zeros before the sequence, none after.
    Causal,
    /// `(k - 1) / 2` zeros on each side; odd kernels only.
    Symmetric,
    /// No padding.
    Valid,
}

impl Padding {
    /// Zeros inserted before and after the sequence for a kernel of size `k`.
    pub fn amounts(self, k: usize) -> Result<(usize, usize)> {
        match self {
            Padding::Causal => Ok((k - 1, 0)),
            Padding::Symmetric if k % 2 == 1 => Ok(((k - 1) / 2, (k - 1) / 2)),
            Padding::Symmetric => Err(Error::InvalidConfig(format!(
                "symmetric padding needs an odd kernel, got {k}"
            ))),
            Padding::Valid => Ok((0, 0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    /// `(out_channels, in_channels / groups, kernel_size)`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub groups: usize,
    pub padding: Padding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Conv1d {
    /// Zero-initialized convolution.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        groups: usize,
        padding: Padding,
        bias: bool,
    ) -> Result<Self> {
        if kernel_size == 0 || in_channels == 0 || out_channels == 0 {
            return Err(Error::InvalidConfig(
                "convolution sizes must be positive".into(),
            ));
        }
        if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::InvalidConfig(format!(
                "channels ({in_channels} in, {out_channels} out) must be divisible by groups ({groups})"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidConfig("stride must be positive".into()));
        }
        padding.amounts(kernel_size)?;
        Ok(Self {
            weight: Tensor::zeros(&[out_channels, in_channels / groups, kernel_size]),
            bias: bias.then(|| Tensor::zeros(&[out_channels])),
            stride,
            groups,
            padding,
        })
    }

    /// Depthwise convolution: one kernel per channel.
    pub fn depthwise(channels: usize, kernel_size: usize, padding: Padding, bias: bool) -> Result<Self> {
        Self::new(channels, channels, kernel_size, 1, channels, padding, bias)
    }

    /// Uniform fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init_uniform<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let fan_in = (self.weight.shape()[1] * self.weight.shape()[2]) as f32;
        let bound = 1.0 / fan_in.sqrt();
        for w in self.weight.data_mut() {
            *w = rng.gen_range(-bound..bound);
        }
        if let Some(b) = &mut self.bias {
            for v in b.data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.groups
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels() && self.groups == self.out_channels()
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }

    pub fn output_len(&self, t: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::InvalidConfig("stride must be positive".into()));
        }
        let k = self.kernel_size();
        let (left, right) = self.padding.amounts(k)?;
        let padded = t + left + right;
        if t == 0 || padded < k {
            return Err(Error::Shape(format!(
                "input length {t} too short for kernel {k} with {:?} padding",
                self.padding
            )));
        }
        Ok((padded - k) / self.stride + 1)
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
        let (n, c, t) = x.batch_dims()?;
        if c != self.in_channels() {
            return Err(Error::ChannelMismatch {
                expected: self.in_channels(),
                got: c,
            });
        }
        if let Some(b) = &self.bias {
            if b.shape() != [self.out_channels()] {
                return Err(Error::Shape(format!(
                    "bias shape {:?} does not match {} output channels",
                    b.shape(),
                    self.out_channels()
                )));
            }
        }
        let out_len = self.output_len(t)?;
        Ok((n, c, t, out_len))
    }

    /// Output positions `[lo, hi)` whose tap `j` lands inside the unpadded input.
    fn valid_range(&self, j: usize, t: usize, out_len: usize) -> (usize, usize) {
        let (left, _) = self.padding.amounts(self.kernel_size()).unwrap_or((0, 0));
        let s = self.stride;
        let lo = if left > j { (left - j).div_ceil(s) } else { 0 };
        if t - 1 + left < j {
            return (0, 0);
        }
        let hi = ((t - 1 + left - j) / s + 1).min(out_len);
        (lo.min(hi), hi)
    }

    fn out_shape(x: &Tensor, n: usize, c: usize, t: usize) -> Vec<usize> {
        if x.rank() == 2 {
            vec![c, t]
        } else {
            vec![n, c, t]
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, t, out_len) = self.check_input(x)?;
        let out_ch = self.out_channels();
        let in_per_group = self.weight.shape()[1];
        let out_per_group = out_ch / self.groups;
        let k = self.kernel_size();
        let (left, _) = self.padding.amounts(k)?;
        let s = self.stride;
        let phases = PhaseLayout::new(t, s);
        let xd = phases.split(x.data(), n * c);
        let wd = self.weight.data();
        let mut out = vec![0.0f32; n * out_ch * out_len];
        let ranges: Vec<(usize, usize)> = (0..k).map(|j| self.valid_range(j, t, out_len)).collect();

        for b in 0..n {
            for o in 0..out_ch {
                let g = o / out_per_group;
                let row = &mut out[(b * out_ch + o) * out_len..(b * out_ch + o + 1) * out_len];
                if let Some(bias) = &self.bias {
                    row.fill(bias.data()[o]);
                }
                for ci in 0..in_per_group {
                    let src = b * c + g * in_per_group + ci;
                    let xrow = &xd[src * t..(src + 1) * t];
                    let wrow = &wd[(o * in_per_group + ci) * k..(o * in_per_group + ci + 1) * k];
                    for (j, &w) in wrow.iter().enumerate() {
                        let (lo, hi) = ranges[j];
                        if lo >= hi {
                            continue;
                        }
                        let start = phases.locate(lo * s + j - left);
                        axpy(w, &xrow[start..start + (hi - lo)], &mut row[lo..hi]);
                    }
                }
            }
        }
        Tensor::new(Self::out_shape(x, n, out_ch, out_len), out)?.ensure_finite("conv1d forward")
    }

    pub fn backward(&self, x: &Tensor, grad_out: &Tensor) -> Result<(Tensor, ConvGrads)> {
        let (n, c, t, out_len) = self.check_input(x)?;
        let out_ch = self.out_channels();
        let expected = Self::out_shape(x, n, out_ch, out_len);
        if grad_out.shape() != expected.as_slice() {
            return Err(Error::Shape(format!(
                "grad_out shape {:?} does not match forward output {:?}",
                grad_out.shape(),
                expected
            )));
        }
        let in_per_group = self.weight.shape()[1];
        let out_per_group = out_ch / self.groups;
        let k = self.kernel_size();
        let (left, _) = self.padding.amounts(k)?;
        let s = self.stride;
        let phases = PhaseLayout::new(t, s);
        let xd = phases.split(x.data(), n * c);
        let gd = grad_out.data();
        let wd = self.weight.data();
        let mut gx = vec![0.0f32; n * c * t];
        let mut gw = vec![0.0f32; self.weight.numel()];
        let mut gb = self.bias.as_ref().map(|_| vec![0.0f32; out_ch]);
        let ranges: Vec<(usize, usize)> = (0..k).map(|j| self.valid_range(j, t, out_len)).collect();

        for b in 0..n {
            for o in 0..out_ch {
                let g = o / out_per_group;
                let grow = &gd[(b * out_ch + o) * out_len..(b * out_ch + o + 1) * out_len];
                if let Some(gb) = &mut gb {
                    gb[o] += grow.iter().sum::<f32>();
                }
                for ci in 0..in_per_group {
                    let src = b * c + g * in_per_group + ci;
                    let xrow = &xd[src * t..(src + 1) * t];
                    let gxrow = &mut gx[src * t..(src + 1) * t];
                    let wbase = (o * in_per_group + ci) * k;
                    for j in 0..k {
                        let (lo, hi) = ranges[j];
                        if lo >= hi {
                            continue;
                        }
                        let start = phases.locate(lo * s + j - left);
                        let span = hi - lo;
                        gw[wbase + j] += dot(&grow[lo..hi], &xrow[start..start + span]);
                        axpy(wd[wbase + j], &grow[lo..hi], &mut gxrow[start..start + span]);
                    }
                }
            }
        }
        let gx = phases.merge(gx, n * c);
        let grad_x = Tensor::new(x.shape().to_vec(), gx)?.ensure_finite("conv1d backward")?;
        let grads = ConvGrads {
            weight: Tensor::new(self.weight.shape().to_vec(), gw)?,
            bias: gb.map(Tensor::from_vec),
        };
        Ok((grad_x, grads))
    }
}

/// Rows of length `t` reordered so that samples `r, r + s, r + 2s, ...` are
/// contiguous for each phase `r`; strided taps then read contiguous runs.
struct PhaseLayout {
    t: usize,
    s: usize,
    offsets: Vec<usize>,
}

impl PhaseLayout {
    fn new(t: usize, s: usize) -> Self {
        let mut offsets = Vec::with_capacity(s);
        let mut acc = 0;
        for r in 0..s {
            offsets.push(acc);
            acc += if r < t { (t - r).div_ceil(s) } else { 0 };
        }
        Self { t, s, offsets }
    }

    /// Position of original index `i` within a reordered row.
    fn locate(&self, i: usize) -> usize {
        self.offsets[i % self.s] + i / self.s
    }

    fn split<'a>(&self, data: &'a [f32], rows: usize) -> std::borrow::Cow<'a, [f32]> {
        if self.s == 1 {
            return std::borrow::Cow::Borrowed(data);
        }
        let mut out = vec![0.0f32; data.len()];
        for r in 0..rows {
            let src = &data[r * self.t..(r + 1) * self.t];
            let dst = &mut out[r * self.t..(r + 1) * self.t];
            for (i, &v) in src.iter().enumerate() {
                dst[self.locate(i)] = v;
            }
        }
        std::borrow::Cow::Owned(out)
    }

    fn merge(&self, data: Vec<f32>, rows: usize) -> Vec<f32> {
        if self.s == 1 {
            return data;
        }
        let mut out = vec![0.0f32; data.len()];
        for r in 0..rows {
            let src = &data[r * self.t..(r + 1) * self.t];
            let dst = &mut out[r * self.t..(r + 1) * self.t];
            for (i, d) in dst.iter_mut().enumerate() {
                *d = src[self.locate(i)];
            }
        }
        out
    }
}

/// `y += a * x`, element by element in order.
fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with eight independent partial sums.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f32>() + tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(weight: &[f32], padding: Padding) -> Conv1d {
        let mut c = Conv1d::new(1, 1, weight.len(), 1, 1, padding, false).unwrap();
        c.weight.data_mut().copy_from_slice(weight);
        c
    }

    #[test]
    fn identity_kernel() {
        let c = single(&[1.0], Padding::Causal);
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(c.forward(&x).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn causal_last_tap_is_current_frame() {
        let c = single(&[0.0, 0.0, 1.0], Padding::Causal);
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(c.forward(&x).unwrap().data(), &[1.0, 2.0, 3.0]);
        let delayed = single(&[1.0, 0.0, 0.0], Padding::Causal);
        assert_eq!(delayed.forward(&x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    /// Direct loop over the explicitly padded sequence.
    fn reference(conv: &Conv1d, x: &Tensor) -> Vec<f32> {
        let (n, c, t) = x.batch_dims().unwrap();
        let k = conv.kernel_size();
        let (left, right) = conv.padding.amounts(k).unwrap();
        let out_ch = conv.out_channels();
        let ipg = conv.weight.shape()[1];
        let opg = out_ch / conv.groups;
        let tp = t + left + right;
        let tout = (tp - k) / conv.stride + 1;
        let mut out = vec![0.0f32; n * out_ch * tout];
        for b in 0..n {
            for o in 0..out_ch {
                for to in 0..tout {
                    let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.data()[o]) as f64;
                    for ci in 0..ipg {
                        let ch = (o / opg) * ipg + ci;
                        for j in 0..k {
                            let p = to * conv.stride + j;
                            let v = if p < left || p >= left + t {
                                0.0
                            } else {
                                x.data()[(b * c + ch) * t + p - left]
                            };
                            acc += (conv.weight.data()[(o * ipg + ci) * k + j] * v) as f64;
                        }
                    }
                    out[(b * out_ch + o) * tout + to] = acc as f32;
                }
            }
        }
        out
    }

    #[test]
    fn depthwise_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut conv = Conv1d::depthwise(4, 7, Padding::Causal, true).unwrap();
        conv.init_uniform(&mut rng);
        let x = Tensor::new(vec![4, 32], (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let y = conv.forward(&x).unwrap();
        for (a, b) in y.data().iter().zip(reference(&conv, &x)) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn grouped_strided_padded_variants_match_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &(cin, cout, k, s, g, pad) in &[
            (4, 6, 5, 2, 2, Padding::Causal),
            (3, 3, 3, 1, 1, Padding::Symmetric),
            (2, 4, 3, 3, 1, Padding::Valid),
            (16, 8, 5, 2, 1, Padding::Causal),
        ] {
            let mut conv = Conv1d::new(cin, cout, k, s, g, pad, true).unwrap();
            conv.init_uniform(&mut rng);
            let x = Tensor::new(vec![2, cin, 11], (0..2 * cin * 11).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
            let y = conv.forward(&x).unwrap();
            for (a, b) in y.data().iter().zip(reference(&conv, &x)) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn causal_output_length_with_stride() {
        let c = Conv1d::new(1, 1, 5, 2, 1, Padding::Causal, false).unwrap();
        // floor((T + k - 1 - k) / s) + 1 = ceil(T / 2)
        assert_eq!(c.output_len(149).unwrap(), 75);
        assert_eq!(c.output_len(150).unwrap(), 75);
        assert_eq!(c.output_len(1).unwrap(), 1);
    }

    #[test]
    fn channel_mismatch_and_bad_stride() {
        let mut c = Conv1d::depthwise(4, 3, Padding::Causal, false).unwrap();
        assert!(matches!(
            c.forward(&Tensor::zeros(&[3, 8])),
            Err(Error::ChannelMismatch { expected: 4, got: 3 })
        ));
        c.stride = 0;
        assert!(c.forward(&Tensor::zeros(&[4, 8])).is_err());
        assert!(Conv1d::new(4, 4, 3, 0, 1, Padding::Causal, false).is_err());
        assert!(Conv1d::new(4, 6, 3, 1, 4, Padding::Causal, false).is_err());
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv1d::depthwise(3, 5, Padding::Causal, true).unwrap();
        conv.init_uniform(&mut rng);
        let x = Tensor::new(vec![3, 9], (0..27).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (gx, g) = conv.backward(&x, &Tensor::zeros(&[3, 9])).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(g.weight.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointwise_weight_grad_is_a_dot_product() {
        let conv = single(&[0.5], Padding::Causal);
        let x = Tensor::new(vec![1, 4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let go = Tensor::new(vec![1, 4], vec![0.1, 0.2, -0.3, 1.0]).unwrap();
        let (gx, g) = conv.backward(&x, &go).unwrap();
        let dot: f32 = x.data().iter().zip(go.data()).map(|(a, b)| a * b).sum();
        assert!((g.weight.data()[0] - dot).abs() < 1e-6);
        assert_eq!(gx.data(), &[0.05, 0.1, -0.15, 0.5]);
    }

    #[test]
    fn backward_rejects_wrong_grad_shape() {
        let conv = single(&[1.0, 1.0], Padding::Causal);
        let x = Tensor::zeros(&[1, 4]);
        assert!(conv.backward(&x, &Tensor::zeros(&[1, 3])).is_err());
    }
}
