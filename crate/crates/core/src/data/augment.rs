//! Gain, additive noise and room-impulse augmentation. All of them keep the
//! sample count.

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{empty_err, rms};
use crate::error::{Error, Result};

pub const GAIN_DB_RANGE: (f32, f32) = (-40.0, 10.0);

fn clip_unit(v: f32) -> f32 {
    v.clamp(-1.0, 1.0)
}

pub fn gain_augment(samples: &[f32], db: f32) -> Result<Vec<f32>> {
    if !(GAIN_DB_RANGE.0..=GAIN_DB_RANGE.1).contains(&db) {
        return Err(Error::Data(format!(
            "gain {db} dB outside [{}, {}]",
            GAIN_DB_RANGE.0, GAIN_DB_RANGE.1
        )));
    }
    let g = 10f64.powf(db as f64 / 20.0);
    Ok(samples.iter().map(|&s| clip_unit((s as f64 * g) as f32)).collect())
}

/// Gain drawn uniformly in `[lo, hi]` dB.
pub fn random_gain<R: Rng + ?Sized>(samples: &[f32], lo: f32, hi: f32, rng: &mut R) -> Result<Vec<f32>> {
    let db = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    gain_augment(samples, db)
}

/// Factor applied to `noise` so that `rms(signal) / rms(scaled noise)` equals
/// the requested SNR.
pub fn noise_scale(signal: &[f32], noise: &[f32], snr_db: f32) -> Result<f64> {
    let rs = rms(signal);
    if rs == 0.0 {
        return Err(Error::Data("signal is silent, SNR is undefined".into()));
    }
    let rn = rms(noise);
    if rn == 0.0 {
        return Err(Error::Data("noise is silent, SNR is undefined".into()));
    }
    Ok(rs / (rn * 10f64.powf(snr_db as f64 / 20.0)))
}

/// Adds `noise`, tiled to the signal length, at the given SNR.
pub fn mix_noise(samples: &[f32], noise: &[f32], snr_db: f32) -> Result<Vec<f32>> {
    if snr_db == f32::INFINITY {
        return Ok(samples.to_vec());
    }
    if snr_db.is_nan() {
        return Err(Error::Data("SNR is NaN".into()));
    }
    if noise.is_empty() {
        return Err(empty_err("noise"));
    }
    let tiled: Vec<f32> = noise.iter().copied().cycle().take(samples.len()).collect();
    let scale = noise_scale(samples, &tiled, snr_db)?;
    Ok(samples
        .iter()
        .zip(&tiled)
        .map(|(&s, &n)| clip_unit((s as f64 + scale * n as f64) as f32))
        .collect())
}

const FFT_THRESHOLD: usize = 64;

/// Causal convolution with `impulse`, truncated to the input length and
/// divided by its peak if that exceeds 1.
pub fn rir_convolve(samples: &[f32], impulse: &[f32]) -> Result<Vec<f32>> {
    if impulse.is_empty() {
        return Err(empty_err("impulse response"));
    }
    let n = samples.len();
    let mut y = if impulse.len() <= FFT_THRESHOLD {
        let mut y = vec![0f64; n];
        for (t, out) in y.iter_mut().enumerate() {
            for (j, &h) in impulse.iter().enumerate().take(t + 1) {
                *out += h as f64 * samples[t - j] as f64;
            }
        }
        y
    } else {
        fft_convolve(samples, impulse)
    };
    let peak = y.iter().fold(0f64, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        y.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(y.into_iter().map(|v| v as f32).collect())
}

fn fft_convolve(x: &[f32], h: &[f32]) -> Vec<f64> {
    let n = x.len();
    let size = (n + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let pad = |v: &[f32]| {
        let mut b: Vec<Complex<f64>> = v.iter().map(|&s| Complex::new(s as f64, 0.0)).collect();
        b.resize(size, Complex::new(0.0, 0.0));
        b
    };
    let mut a = pad(x);
    let mut b = pad(h);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    a.iter().take(n).map(|c| c.re / size as f64).collect()
}
