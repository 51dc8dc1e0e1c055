//! An MFCC written out step by step with a naive DFT, used as an oracle.

use std::f64::consts::PI;

use rand::Rng;

/// Straight-line MFCC: periodic Hann, naive DFT, HTK mel triangles from 0 Hz
/// to Nyquist, natural log with a 1e-10 floor, orthonormal DCT-II.
pub fn reference_mfcc(samples: &[f32]) -> Vec<Vec<f64>> {
    let (sr, win, hop, nfft, nmel, ncep) = (16000.0f64, 400usize, 160usize, 512usize, 26usize, 16usize);
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let inv_mel = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let top = mel(sr / 2.0);
    let edges: Vec<f64> = (0..nmel + 2).map(|i| inv_mel(top * i as f64 / (nmel + 1) as f64)).collect();

    let mut frames = Vec::new();
    let mut start = 0;
    while start + win <= samples.len() {
        let windowed: Vec<f64> = (0..win)
            .map(|n| samples[start + n] as f64 * (0.5 - 0.5 * (2.0 * PI * n as f64 / win as f64).cos()))
            .collect();
        let power: Vec<f64> = (0..=nfft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, v) in windowed.iter().enumerate() {
                    let ang = -2.0 * PI * (k * n) as f64 / nfft as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                re * re + im * im
            })
            .collect();
        let logmel: Vec<f64> = (0..nmel)
            .map(|m| {
                let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let e: f64 = power
                    .iter()
                    .enumerate()
                    .map(|(k, p)| {
                        let f = k as f64 * sr / nfft as f64;
                        let w = ((f - lo) / (c - lo)).min((hi - f) / (hi - c)).max(0.0);
                        w * p
                    })
                    .sum();
                (e + 1e-10).ln()
            })
            .collect();
        let cep = (0..ncep)
            .map(|q| {
                let norm = if q == 0 { (1.0 / nmel as f64).sqrt() } else { (2.0 / nmel as f64).sqrt() };
                norm * logmel
                    .iter()
                    .enumerate()
                    .map(|(m, l)| l * (PI * q as f64 * (m as f64 + 0.5) / nmel as f64).cos())
                    .sum::<f64>()
            })
            .collect();
        frames.push(cep);
        start += hop;
    }
    frames
}

pub fn random_clip(r: &mut impl Rng, len: usize) -> Vec<f32> {
    let amp = r.gen_range(0.01..0.9);
    let tone = r.gen_range(100.0..7000.0);
    (0..len)
        .map(|n| {
            let s = 0.5 * (2.0 * std::f32::consts::PI * tone * n as f32 / 16000.0).sin() + r.gen_range(-0.5..0.5);
            amp * s
        })
        .collect()
}

/// Worst absolute deviation from the reference over `clips` random clips.
pub fn worst_deviation_on_random_clips(r: &mut impl Rng, clips: usize) -> f64 {
    use repcnn::features::{Mfcc, MfccConfig};
    let extractor = Mfcc::new(MfccConfig::default()).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..clips {
        let len = r.gen_range(400..4000);
        let clip = random_clip(r, len);
        let got = extractor.compute(&clip).unwrap();
        let want = reference_mfcc(&clip);
        let t = want.len();
        assert_eq!(got.shape(), &[16, t]);
        for (f, frame) in want.iter().enumerate() {
            for (q, &v) in frame.iter().enumerate() {
                worst = worst.max((got.data()[q * t + f] as f64 - v).abs());
            }
        }
    }
    worst
}

/// True when delaying each clip by one hop shifts every coefficient row by
/// exactly one column.
pub fn shift_is_bitwise(r: &mut impl Rng, clips: usize) -> bool {
    use repcnn::features::{mfcc, MfccConfig};
    let cfg = MfccConfig::default();
    (0..clips).all(|_| {
        let clip = random_clip(r, 3000);
        let mut delayed: Vec<f32> = (0..cfg.hop).map(|_| r.gen_range(-0.1..0.1)).collect();
        delayed.extend_from_slice(&clip);
        let a = mfcc(&clip, &cfg).unwrap();
        let b = mfcc(&delayed, &cfg).unwrap();
        let (ta, tb) = (a.shape()[1], b.shape()[1]);
        tb == ta + 1 && (0..16).all(|q| a.data()[q * ta..(q + 1) * ta] == b.data()[q * tb + 1..(q + 1) * tb])
    })
}
