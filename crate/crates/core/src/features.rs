//! MFCC front end: 25 ms Hann windows every 10 ms, 512-point power
//! spectrum, 26 HTK-mel triangular filters, log, orthonormal DCT-II.
//!
//! Intermediate arithmetic is `f64`; the output tensor is `f32`.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window: 400,
            hop: 160,
            fft_size: 512,
            n_mels: 26,
            n_mfcc: 16,
            log_floor: 1e-10,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return Err(Error::InvalidConfig(format!(
                "n_mfcc ({}) must be in 1..=n_mels ({})",
                self.n_mfcc, self.n_mels
            )));
        }
        if self.fft_size < self.window || self.window == 0 || self.hop == 0 {
            return Err(Error::InvalidConfig(format!(
                "need 0 < window ({}) <= fft_size ({}) and hop > 0",
                self.window, self.fft_size
            )));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frames produced from `samples` samples; partial tail frames are dropped.
    pub fn num_frames(&self, samples: usize) -> usize {
        if samples < self.window {
            0
        } else {
            1 + (samples - self.window) / self.hop
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Periodic Hann window, `0.5 - 0.5 cos(2 pi n / N)`.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Triangular filters equally spaced on the mel scale from 0 Hz to Nyquist.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// `n_mels` rows of `fft_size / 2 + 1` weights.
    pub weights: Vec<Vec<f64>>,
}

impl MelFilterbank {
    pub fn new(cfg: &MfccConfig) -> Self {
        let nyquist = cfg.sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
        let weights = (0..cfg.n_mels)
            .map(|m| {
                let (lo, centre, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..cfg.num_bins())
                    .map(|b| {
                        let f = b as f64 * bin_hz;
                        if f >= lo && f <= centre {
                            (f - lo) / (centre - lo)
                        } else if f > centre && f <= hi {
                            (hi - f) / (hi - centre)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        Self { weights }
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|row| row.iter().zip(power).map(|(w, p)| w * p).sum())
            .collect()
    }
}

/// Sliding Hann-weighted windows; partial tail frames are dropped.
pub fn frame_and_window(samples: &[f32], cfg: &MfccConfig) -> Vec<Vec<f64>> {
    let window = hann_window(cfg.window);
    (0..cfg.num_frames(samples.len()))
        .map(|i| {
            let start = i * cfg.hop;
            samples[start..start + cfg.window]
                .iter()
                .zip(&window)
                .map(|(&s, &w)| s as f64 * w)
                .collect()
        })
        .collect()
}

/// Reusable MFCC extractor holding the FFT plan, window, filterbank and DCT.
pub struct Mfcc {
    cfg: MfccConfig,
    window: Vec<f64>,
    filterbank: MelFilterbank,
    dct: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Mfcc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mfcc").field("cfg", &self.cfg).finish()
    }
}

impl Mfcc {
    pub fn new(cfg: MfccConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        let n = cfg.n_mels as f64;
        let dct = (0..cfg.n_mfcc)
            .map(|k| {
                let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                (0..cfg.n_mels)
                    .map(|m| scale * (std::f64::consts::PI * k as f64 * (2 * m + 1) as f64 / (2.0 * n)).cos())
                    .collect()
            })
            .collect();
        Ok(Self {
            window: hann_window(cfg.window),
            filterbank: MelFilterbank::new(&cfg),
            dct,
            fft,
            cfg,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// `|DFT|^2` of a zero-padded frame, bins `0..=fft_size/2`.
    pub fn power_spectrum(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(self.cfg.fft_size)
            .collect();
        self.fft.process(&mut buf);
        buf[..self.cfg.num_bins()].iter().map(|c| c.norm_sqr()).collect()
    }

    /// Orthonormal DCT-II of the log filterbank energies, first `n_mfcc` terms.
    pub fn cepstrum(&self, mel_energies: &[f64]) -> Vec<f64> {
        let logs: Vec<f64> = mel_energies.iter().map(|e| (e + self.cfg.log_floor).ln()).collect();
        self.dct
            .iter()
            .map(|row| row.iter().zip(&logs).map(|(c, l)| c * l).sum())
            .collect()
    }

    /// `(n_mfcc, frames)` features.
    pub fn compute(&self, samples: &[f32]) -> Result<Tensor> {
        let frames = self.cfg.num_frames(samples.len());
        if frames == 0 {
            return Err(Error::Data(format!(
                "audio of {} samples is shorter than one {}-sample window",
                samples.len(),
                self.cfg.window
            )));
        }
        let n_mfcc = self.cfg.n_mfcc;
        let mut out = vec![0.0f32; n_mfcc * frames];
        let mut frame = vec![0.0f64; self.cfg.window];
        for f in 0..frames {
            let start = f * self.cfg.hop;
            for ((dst, &s), &w) in frame.iter_mut().zip(&samples[start..start + self.cfg.window]).zip(&self.window) {
                *dst = s as f64 * w;
            }
            let power = self.power_spectrum(&frame);
            let coeffs = self.cepstrum(&self.filterbank.apply(&power));
            for (k, c) in coeffs.iter().enumerate() {
                out[k * frames + f] = *c as f32;
            }
        }
        Tensor::new(vec![n_mfcc, frames], out)?.ensure_finite("mfcc")
    }
}

/// One-shot MFCC extraction.
pub fn mfcc(samples: &[f32], cfg: &MfccConfig) -> Result<Tensor> {
    Mfcc::new(cfg.clone())?.compute(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_counts() {
        let cfg = MfccConfig::default();
        assert_eq!(frame_and_window(&[0.0; 400], &cfg).len(), 1);
        assert_eq!(frame_and_window(&[0.0; 560], &cfg).len(), 2);
        assert_eq!(frame_and_window(&[0.0; 559], &cfg).len(), 1);
        assert_eq!(cfg.num_frames(16_000), 98);
    }

    #[test]
    fn constant_input_is_the_hann_taper() {
        let cfg = MfccConfig::default();
        let frames = frame_and_window(&[0.5; 400], &cfg);
        for (n, v) in frames[0].iter().enumerate() {
            let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / 400.0).cos();
            assert!((v - 0.5 * w).abs() < 1e-6);
        }
    }

    #[test]
    fn power_spectrum_basics() {
        let m = Mfcc::new(MfccConfig::default()).unwrap();
        assert!(m.power_spectrum(&[0.0; 400]).iter().all(|&p| p == 0.0));
        let dc = m.power_spectrum(&[1.0; 512]);
        assert!((dc[0] - 512.0f64.powi(2)).abs() < 1e-6);
        assert!(dc[1..].iter().all(|&p| p < 1e-12));
    }

    #[test]
    fn tone_peaks_at_expected_bin_and_matches_naive_dft() {
        let m = Mfcc::new(MfccConfig::default()).unwrap();
        // 1 kHz at 16 kHz over 512 points -> bin 32
        let frame: Vec<f64> = (0..400)
            .map(|n| (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 16000.0).sin())
            .collect();
        let p = m.power_spectrum(&frame);
        let peak = p.iter().enumerate().fold((0, 0.0), |a, (i, &v)| if v > a.1 { (i, v) } else { a }).0;
        assert_eq!(peak, 32);
        for (b, &pv) in p.iter().enumerate() {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (n, &x) in frame.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (b * n) as f64 / 512.0;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            let naive = re * re + im * im;
            assert!((pv - naive).abs() <= 1e-4 * naive.max(1e-6), "bin {b}: {pv} vs {naive}");
        }
    }

    #[test]
    fn filters_are_nonnegative_and_cross_at_half_height() {
        let cfg = MfccConfig::default();
        let fb = MelFilterbank::new(&cfg);
        assert_eq!(fb.weights.len(), 26);
        assert!(fb.weights.iter().flatten().all(|&w| w >= 0.0));
        // adjacent filters sum to one between their centres, so they meet at 0.5
        let top = hz_to_mel(8000.0);
        let edges: Vec<f64> = (0..28).map(|i| mel_to_hz(top * i as f64 / 27.0)).collect();
        for m in 0..25 {
            for b in 0..cfg.num_bins() {
                let f = b as f64 * 31.25;
                if f > edges[m + 1] && f < edges[m + 2] {
                    assert!((fb.weights[m][b] + fb.weights[m + 1][b] - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn silence_gives_dct_of_log_floor() {
        let cfg = MfccConfig::default();
        let out = mfcc(&[0.0; 1600], &cfg).unwrap();
        let frames = out.shape()[1];
        let c0 = (1e-10f64).ln() * 26.0 / 26f64.sqrt();
        for f in 0..frames {
            assert!((out.data()[f] as f64 - c0).abs() < 1e-3);
            for k in 1..16 {
                assert!(out.data()[k * frames + f].abs() < 1e-3);
            }
        }
    }

    #[test]
    fn too_short_is_an_error() {
        assert!(mfcc(&[0.0; 399], &MfccConfig::default()).is_err());
        let bad = MfccConfig { n_mfcc: 30, ..Default::default() };
        assert!(Mfcc::new(bad).is_err());
    }
}
