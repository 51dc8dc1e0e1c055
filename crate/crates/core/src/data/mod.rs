//! Audio ingestion, window harvesting, augmentation and synthetic data.

pub mod augment;
pub mod harvest;
pub mod manifest;
pub mod synth;
pub mod wav;

use std::path::Path;

use crate::error::{Error, Result};
use crate::features::Mfcc;
use crate::tensor::Tensor;

pub use augment::{gain_augment, mix_noise, noise_scale, random_gain, rir_convolve};
pub use harvest::{harvest_negatives, harvest_positive, harvest_windows, Label, WindowSample, NEGATIVES_PER_POSITIVE};
pub use manifest::{KeywordSpan, Manifest, ManifestEntry, Split};
pub use synth::{generate_synthetic_dataset, synthesize, chirp_template, SynthSpec, SyntheticUtterance};
pub use wav::{read_wav_samples, write_wav, SAMPLE_RATE};

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub keyword_span: Option<KeywordSpan>,
}

impl Utterance {
    pub fn new(id: impl Into<String>, samples: Vec<f32>, keyword_span: Option<KeywordSpan>) -> Self {
        Self {
            id: id.into(),
            samples,
            sample_rate: SAMPLE_RATE,
            keyword_span,
        }
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// MFCC features, validating the span against the frame count.
    pub fn features(&self, mfcc: &Mfcc) -> Result<FeatureSequence> {
        let features = mfcc.compute(&self.samples)?;
        let frames = features.shape()[1];
        if let Some(span) = self.keyword_span {
            span.check_within(frames)?;
        }
        Ok(FeatureSequence {
            id: self.id.clone(),
            features,
            span: self.keyword_span,
        })
    }
}

/// An utterance after feature extraction: `(16, T)` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub id: String,
    pub features: Tensor,
    pub span: Option<KeywordSpan>,
}

impl FeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.features.shape()[1]
    }
}

pub fn read_wav(path: &Path) -> Result<Utterance> {
    let samples = read_wav_samples(path)?;
    let id = path.to_string_lossy().into_owned();
    Ok(Utterance::new(id, samples, None))
}

/// Loads every utterance of one split, attaching manifest spans.
pub fn load_split(manifest: &Manifest, split: Split) -> Result<Vec<Utterance>> {
    manifest
        .split(split)
        .map(|e| {
            let mut u = read_wav(&e.path)?;
            u.id = e.id(&manifest.root);
            u.keyword_span = e.span;
            Ok(u)
        })
        .collect()
}

/// Feature-extracts a list of utterances in parallel, preserving order.
pub fn featurize(utterances: &[Utterance], mfcc: &Mfcc) -> Result<Vec<FeatureSequence>> {
    use rayon::prelude::*;
    utterances.par_iter().map(|u| u.features(mfcc)).collect()
}

/// Mixes a global seed with an utterance id (FNV-1a then splitmix64).
pub fn derive_seed(seed: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn rms(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64).sqrt()
}

pub(crate) fn empty_err(what: &str) -> Error {
    Error::Empty(what.to_string())
}
