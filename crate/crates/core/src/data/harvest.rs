//! Positive and negative training windows.
//!
//! A positive window ends exactly at the keyword's end frame. A negative
//! window is any window that does not contain the whole keyword span; partial
//! overlap is allowed.

use rand::Rng;

use super::{FeatureSequence, KeywordSpan};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NEGATIVES_PER_POSITIVE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn target(self) -> f32 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// `(16, W)` features.
    pub features: Tensor,
    pub label: Label,
    pub source_id: String,
    /// First frame of the window within its utterance.
    pub offset: usize,
}

fn contains(span: &KeywordSpan, offset: usize, window: usize) -> bool {
    offset <= span.start_frame && offset + window >= span.end_frame
}

pub fn harvest_positive(seq: &FeatureSequence, window: usize) -> Result<WindowSample> {
    let span = seq
        .span
        .ok_or_else(|| Error::Data(format!("{}: no keyword span to harvest", seq.id)))?;
    if span.len() > window {
        return Err(Error::Data(format!(
            "{}: keyword spans {} frames, longer than the {window}-frame window",
            seq.id,
            span.len()
        )));
    }
    if span.end_frame < window {
        return Err(Error::Data(format!(
            "{}: keyword ends at frame {}, before a full {window}-frame window is available",
            seq.id, span.end_frame
        )));
    }
    span.check_within(seq.num_frames())?;
    let offset = span.end_frame - window;
    Ok(WindowSample {
        features: seq.features.slice_time(offset, span.end_frame)?,
        label: Label::Positive,
        source_id: seq.id.clone(),
        offset,
    })
}

/// Offsets whose window does not fully contain the keyword.
pub fn negative_offsets(seq: &FeatureSequence, window: usize) -> Result<Vec<usize>> {
    let t = seq.num_frames();
    if t < window {
        return Err(Error::Data(format!(
            "{}: {t} frames is shorter than the {window}-frame window",
            seq.id
        )));
    }
    Ok((0..=t - window)
        .filter(|&o| seq.span.map_or(true, |s| !contains(&s, o, window)))
        .collect())
}

/// `count` negative windows drawn uniformly with replacement.
pub fn harvest_negatives<R: Rng + ?Sized>(
    seq: &FeatureSequence,
    window: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<WindowSample>> {
    let offsets = negative_offsets(seq, window)?;
    if offsets.is_empty() {
        return Err(Error::Data(format!(
            "{}: every {window}-frame window contains the keyword",
            seq.id
        )));
    }
    (0..count)
        .map(|_| {
            let offset = offsets[rng.gen_range(0..offsets.len())];
            Ok(WindowSample {
                features: seq.features.slice_time(offset, offset + window)?,
                label: Label::Negative,
                source_id: seq.id.clone(),
                offset,
            })
        })
        .collect()
}

/// One positive and `negatives` negatives per keyword-bearing sequence.
pub fn harvest_windows<R: Rng + ?Sized>(
    seqs: &[FeatureSequence],
    window: usize,
    negatives: usize,
    rng: &mut R,
) -> Result<Vec<WindowSample>> {
    let mut out = Vec::with_capacity(seqs.len() * (negatives + 1));
    for s in seqs {
        if s.span.is_some() {
            out.push(harvest_positive(s, window)?);
        }
        out.extend(harvest_negatives(s, window, negatives, rng)?);
    }
    Ok(out)
}
