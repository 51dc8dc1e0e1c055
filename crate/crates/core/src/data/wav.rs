//! 16-bit mono 16 kHz PCM WAV reading and writing.

use std::path::Path;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

fn wav_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::WavFormat {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads samples scaled by `1 / 32768`.
pub fn read_wav_samples(path: &Path) -> Result<Vec<f32>> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(wav_err(path, "expected integer PCM, found floating point samples"));
    }
    if spec.bits_per_sample != 16 {
        return Err(wav_err(path, format!("expected 16-bit samples, found {}-bit", spec.bits_per_sample)));
    }
    if spec.channels != 1 {
        return Err(wav_err(path, format!("expected mono, found {} channels", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(wav_err(
            path,
            format!("expected {SAMPLE_RATE} Hz, found {} Hz", spec.sample_rate),
        ));
    }
    reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0).map_err(|e| wav_err(path, e.to_string())))
        .collect()
}

/// Writes samples as 16-bit PCM, rounding `x * 32768` and saturating.
pub fn write_wav(path: &Path, samples: &[f32]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e.to_string()))?;
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(|e| wav_err(path, e.to_string()))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e.to_string()))
}
