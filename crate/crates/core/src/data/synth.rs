//! Synthetic keyword-spotting corpus.
//!
//! The keyword is a fixed 0.5 s harmonic chirp. Backgrounds are amplitude
//! modulated colored noise mixed with voiced babble. Distractors are the
//! chirp's four quarters played in a shuffled order.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, rms, write_wav, KeywordSpan, Manifest, ManifestEntry, Split, Utterance, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::features::MfccConfig;

pub const KEYWORD_SAMPLES: usize = 8000;
const DISTRACTOR_PIECES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_train: usize,
    pub num_val: usize,
    pub num_test_positive: usize,
    pub num_test_negative: usize,
    pub utterance_seconds: f64,
    pub negative_seconds: f64,
    /// Keyword SNR range in dB, relative to the background under it.
    pub snr_db: (f64, f64),
    pub background_rms: f64,
    /// Probability that a keyword utterance also carries one distractor.
    pub distractor_prob: f64,
    pub distractors_per_negative_second: f64,
    /// Model window; keywords never end before it.
    pub window_frames: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_train: 1000,
            num_val: 200,
            num_test_positive: 200,
            num_test_negative: 30,
            utterance_seconds: 4.0,
            negative_seconds: 60.0,
            snr_db: (10.0, 16.0),
            background_rms: 0.02,
            distractor_prob: 0.5,
            distractors_per_negative_second: 0.4,
            window_frames: 149,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        let mfcc = MfccConfig::default();
        let frames = mfcc.num_frames(seconds_to_samples(self.utterance_seconds));
        if frames < self.window_frames + keyword_frames() {
            return bad("utterance_seconds too short for one window plus a keyword");
        }
        if seconds_to_samples(self.negative_seconds) < KEYWORD_SAMPLES {
            return bad("negative_seconds shorter than the keyword");
        }
        if !(self.snr_db.0 <= self.snr_db.1) || !(self.background_rms > 0.0) {
            return bad("invalid SNR range or background level");
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) || self.distractors_per_negative_second < 0.0 {
            return bad("invalid distractor rates");
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.num_train + self.num_val + self.num_test_positive + self.num_test_negative
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticUtterance {
    pub utterance: Utterance,
    pub split: Split,
}

fn seconds_to_samples(s: f64) -> usize {
    (s * SAMPLE_RATE as f64).round() as usize
}

/// Frames from the first frame at the keyword onset to one past the first
/// frame covering its last sample.
pub fn keyword_frames() -> usize {
    let cfg = MfccConfig::default();
    (KEYWORD_SAMPLES - cfg.window - 1) / cfg.hop + 2
}

/// The unit-RMS keyword waveform.
pub fn chirp_template() -> Vec<f32> {
    let n = KEYWORD_SAMPLES;
    let sr = SAMPLE_RATE as f64;
    let dur = n as f64 / sr;
    let (f0, f1) = (600.0, 1400.0);
    let taper = n / 10;
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let phase = 2.0 * PI * (f0 * t + 0.5 * (f1 - f0) * t * t / dur);
            let tone = phase.sin() + 0.5 * (2.0 * phase).sin() + 0.25 * (3.0 * phase).sin();
            let edge = i.min(n - 1 - i);
            let env = if edge < taper {
                0.5 - 0.5 * (PI * edge as f64 / taper as f64).cos()
            } else {
                1.0
            };
            tone * env
        })
        .collect();
    let r = (raw.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    raw.iter().map(|v| (v / r) as f32).collect()
}

fn distractor<R: Rng>(template: &[f32], rng: &mut R) -> Vec<f32> {
    let piece = template.len() / DISTRACTOR_PIECES;
    let identity: Vec<usize> = (0..DISTRACTOR_PIECES).collect();
    let mut order = identity.clone();
    while order == identity {
        order.shuffle(rng);
    }
    order
        .iter()
        .flat_map(|&p| template[p * piece..(p + 1) * piece].iter().copied())
        .collect()
}

fn background<R: Rng>(len: usize, level: f64, rng: &mut R) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let mut noise = Vec::with_capacity(len);
    let mut y = 0.0;
    let syl_rate = rng.gen_range(3.0..5.0);
    let syl_phase = rng.gen_range(0.0..2.0 * PI);
    for i in 0..len {
        let w: f64 = rng.sample(StandardNormal);
        y = 0.95 * y + w;
        let env = 0.6 + 0.4 * (2.0 * PI * syl_rate * i as f64 / sr + syl_phase).sin();
        noise.push(y * env);
    }

    let mut babble = vec![0.0; len];
    let seg = (0.2 * sr) as usize;
    let mut phase = 0.0;
    let mut start = 0;
    while start < len {
        let end = (start + seg).min(len);
        let voiced = rng.gen_bool(0.6);
        let pitch: f64 = rng.gen_range(100.0..220.0);
        if voiced {
            for (i, b) in babble[start..end].iter_mut().enumerate() {
                let env = (PI * i as f64 / (end - start) as f64).sin();
                let mut v = 0.0;
                for h in 1..=6 {
                    v += (h as f64 * phase).sin() / h as f64;
                }
                *b = v * env;
                phase += 2.0 * PI * pitch / sr;
            }
        }
        start = end;
    }

    let rn = rms64(&noise).max(1e-12);
    let rb = rms64(&babble).max(1e-12);
    let mut mix: Vec<f64> = noise.iter().zip(&babble).map(|(n, b)| 0.7 * n / rn + 0.5 * b / rb).collect();
    let r = rms64(&mix).max(1e-12);
    mix.iter_mut().for_each(|v| *v *= level / r);
    mix
}

fn rms64(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn add_at(buf: &mut [f64], at: usize, pattern: &[f32], snr_db: f64) {
    let local = rms64(&buf[at..at + pattern.len()]).max(1e-6);
    let gain = local * 10f64.powf(snr_db / 20.0) / rms(pattern).max(1e-12);
    for (b, &p) in buf[at..].iter_mut().zip(pattern) {
        *b += gain * p as f64;
    }
}

/// Clips and rounds onto the 16-bit grid so a WAV round trip is lossless.
fn quantize(buf: &[f64]) -> Vec<f32> {
    buf.iter()
        .map(|&v| ((v * 32768.0).round().clamp(-32768.0, 32767.0) / 32768.0) as f32)
        .collect()
}

fn overlaps(a: usize, b: usize, len: usize) -> bool {
    a < b + len && b < a + len
}

fn keyword_utterance(spec: &SynthSpec, id: &str, seed: u64, template: &[f32]) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, id));
    let mfcc = MfccConfig::default();
    let len = seconds_to_samples(spec.utterance_seconds);
    let level = spec.background_rms * rng.gen_range(0.5..1.5);
    let mut buf = background(len, level, &mut rng);

    let kf = keyword_frames();
    let total = mfcc.num_frames(len);
    let max_end = total.min((len - KEYWORD_SAMPLES) / mfcc.hop + kf);
    let end = rng.gen_range(spec.window_frames..=max_end);
    let start = end - kf;
    let onset = start * mfcc.hop;

    if rng.gen_bool(spec.distractor_prob) {
        let d = distractor(template, &mut rng);
        let free: Vec<usize> = (0..=len - d.len()).filter(|&p| !overlaps(p, onset, KEYWORD_SAMPLES)).collect();
        if !free.is_empty() {
            let at = free[rng.gen_range(0..free.len())];
            add_at(&mut buf, at, &d, rng.gen_range(spec.snr_db.0..=spec.snr_db.1));
        }
    }
    add_at(&mut buf, onset, template, rng.gen_range(spec.snr_db.0..=spec.snr_db.1));
    Utterance::new(id, quantize(&buf), Some(KeywordSpan { start_frame: start, end_frame: end }))
}

fn negative_utterance(spec: &SynthSpec, id: &str, seed: u64, template: &[f32]) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, id));
    let len = seconds_to_samples(spec.negative_seconds);
    let level = spec.background_rms * rng.gen_range(0.5..1.5);
    let mut buf = background(len, level, &mut rng);
    // Non-overlapping slots, one optional distractor per slot.
    let slots = len / KEYWORD_SAMPLES / 2;
    let rate = (spec.distractors_per_negative_second * spec.negative_seconds / slots.max(1) as f64).min(1.0);
    for s in 0..slots {
        if rng.gen_bool(rate) {
            let at = s * 2 * KEYWORD_SAMPLES + rng.gen_range(0..=KEYWORD_SAMPLES);
            let d = distractor(template, &mut rng);
            add_at(&mut buf, at, &d, rng.gen_range(spec.snr_db.0..=spec.snr_db.1));
        }
    }
    Utterance::new(id, quantize(&buf), None)
}

fn split_ids(spec: &SynthSpec) -> Vec<(String, Split)> {
    let mut ids = Vec::with_capacity(spec.total());
    for (split, n) in [
        (Split::Train, spec.num_train),
        (Split::Val, spec.num_val),
        (Split::TestPositive, spec.num_test_positive),
        (Split::TestNegative, spec.num_test_negative),
    ] {
        ids.extend((0..n).map(|i| (format!("{split}/{i:05}.wav"), split)));
    }
    ids
}

/// Generates the corpus in memory. Each utterance draws from its own stream
/// seeded by `(seed, id)`, so the result does not depend on thread count.
pub fn synthesize(spec: &SynthSpec, seed: u64) -> Result<Vec<SyntheticUtterance>> {
    spec.validate()?;
    let template = chirp_template();
    Ok(split_ids(spec)
        .into_par_iter()
        .map(|(id, split)| {
            let utterance = if split == Split::TestNegative {
                negative_utterance(spec, &id, seed, &template)
            } else {
                keyword_utterance(spec, &id, seed, &template)
            };
            SyntheticUtterance { utterance, split }
        })
        .collect())
}

/// Writes WAVs under `out_dir` plus `manifest.csv`, and returns the manifest.
pub fn generate_synthetic_dataset(spec: &SynthSpec, seed: u64, out_dir: &Path) -> Result<Manifest> {
    let items = synthesize(spec, seed)?;
    for split in ["train", "val", "test-positive", "test-negative"] {
        fs::create_dir_all(out_dir.join(split))?;
    }
    items
        .par_iter()
        .try_for_each(|s| write_wav(&out_dir.join(&s.utterance.id), &s.utterance.samples))?;
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        entries: items
            .iter()
            .map(|s| ManifestEntry {
                path: out_dir.join(&s.utterance.id),
                span: s.utterance.keyword_span,
                split: s.split,
            })
            .collect(),
    };
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
