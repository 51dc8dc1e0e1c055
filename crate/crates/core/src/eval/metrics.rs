//! Event grouping, FRR and FA/hr, DET curves and ROC AUC.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{KeywordSpan, Utterance};
use crate::error::{Error, Result};
use crate::features::{Mfcc, MfccConfig};
use crate::model::ModelGraph;
use crate::stream::Streamer;

/// Emit frames (about 2 s at the default stride) during which a following
/// detection is merged into the previous one.
pub const DEFAULT_REFRACTORY: usize = 100;
pub const DEFAULT_FA_TARGET: f64 = 3.0;
const MAX_DET_POINTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    /// First and last supra-threshold emit frame, inclusive.
    pub start: usize,
    pub end: usize,
    pub peak: f32,
}

/// Groups supra-threshold frames (`score >= threshold`). A frame joins the
/// current event when it lies at most `max(refractory, 1)` frames after the
/// event's last frame; otherwise it opens a new event.
pub fn detect_events(scores: &[f32], threshold: f32, refractory: usize) -> Vec<DetectionEvent> {
    let gap = refractory.max(1);
    let mut events: Vec<DetectionEvent> = Vec::new();
    for (t, &s) in scores.iter().enumerate() {
        if s < threshold {
            continue;
        }
        match events.last_mut() {
            Some(e) if t - e.end <= gap => {
                e.end = t;
                e.peak = e.peak.max(s);
            }
            _ => events.push(DetectionEvent {
                start: t,
                end: t,
                peak: s,
            }),
        }
    }
    events
}

/// Inclusive emit-frame range covering a keyword span: from the first emit at
/// or after its onset to the first emit that has seen its last frame.
pub fn ground_truth_emits(span: KeywordSpan, stride: usize) -> (usize, usize) {
    (span.start_frame.div_ceil(stride), (span.end_frame - 1).div_ceil(stride))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredFile {
    pub id: String,
    pub scores: Vec<f32>,
    /// Ground-truth emit range for keyword files.
    pub ground_truth: Option<(usize, usize)>,
    pub duration_seconds: f64,
}

impl ScoredFile {
    pub fn peak(&self) -> Option<f32> {
        self.scores.iter().copied().reduce(f32::max)
    }

    fn detected(&self, threshold: f32, refractory: usize) -> bool {
        let Some((a, b)) = self.ground_truth else {
            return false;
        };
        detect_events(&self.scores, threshold, refractory)
            .iter()
            .any(|e| e.start <= b && e.end >= a)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoredSets {
    pub positives: Vec<ScoredFile>,
    pub negatives: Vec<ScoredFile>,
}

impl ScoredSets {
    pub fn negative_hours(&self) -> f64 {
        self.negatives.iter().map(|f| f.duration_seconds).sum::<f64>() / 3600.0
    }
}

fn score_file(graph: &ModelGraph, mfcc: &Mfcc, u: &Utterance, stride: usize) -> Result<ScoredFile> {
    let seq = u.features(mfcc)?;
    let scores = Streamer::new(graph)?.push_frames(&seq.features)?;
    Ok(ScoredFile {
        id: u.id.clone(),
        scores,
        ground_truth: u.keyword_span.map(|s| ground_truth_emits(s, stride)),
        duration_seconds: u.duration_seconds(),
    })
}

/// Streams every file through a fresh engine. Files are scored in parallel and
/// returned in input order.
pub fn score_test_sets(
    graph: &ModelGraph,
    positives: &[Utterance],
    negatives: &[Utterance],
    mfcc: &MfccConfig,
) -> Result<ScoredSets> {
    if let Some(u) = positives.iter().find(|u| u.keyword_span.is_none()) {
        return Err(Error::Data(format!("{}: positive test file without a keyword span", u.id)));
    }
    if let Some(u) = negatives.iter().find(|u| u.keyword_span.is_some()) {
        return Err(Error::Data(format!("{}: negative test file with a keyword span", u.id)));
    }
    let mfcc = Mfcc::new(mfcc.clone())?;
    let stride = graph.total_stride();
    let score = |set: &[Utterance]| -> Result<Vec<ScoredFile>> {
        set.par_iter().map(|u| score_file(graph, &mfcc, u, stride)).collect()
    };
    Ok(ScoredSets {
        positives: score(positives)?,
        negatives: score(negatives)?,
    })
}

fn raw_frr_fa(sets: &ScoredSets, threshold: f32, refractory: usize) -> Result<(f64, usize)> {
    if sets.positives.is_empty() {
        return Err(Error::Empty("no scored positive files".into()));
    }
    let missed = sets.positives.iter().filter(|f| !f.detected(threshold, refractory)).count();
    let fa = sets
        .negatives
        .iter()
        .map(|f| detect_events(&f.scores, threshold, refractory).len())
        .sum();
    Ok((100.0 * missed as f64 / sets.positives.len() as f64, fa))
}

/// `(FRR %, FA/hr)` at one threshold.
pub fn compute_frr_fa(sets: &ScoredSets, threshold: f32, refractory: usize) -> Result<(f64, f64)> {
    let hours = sets.negative_hours();
    if !(hours > 0.0) {
        return Err(Error::Empty("no negative audio".into()));
    }
    let (frr, fa) = raw_frr_fa(sets, threshold, refractory)?;
    Ok((frr, fa as f64 / hours))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f32,
    pub fa_per_hour: f64,
    pub frr_percent: f64,
}

/// Points sorted by increasing threshold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetCurve {
    pub points: Vec<DetPoint>,
}

/// Thresholds at every positive's ground-truth peak and every local maximum of
/// the negative scores, thinned to at most 1000 evenly spaced order statistics.
pub fn default_thresholds(sets: &ScoredSets) -> Vec<f32> {
    let mut t: Vec<f32> = Vec::new();
    for f in &sets.positives {
        if let Some((a, b)) = f.ground_truth {
            let hi = (b + 1).min(f.scores.len());
            if let Some(p) = f.scores.get(a..hi).and_then(|s| s.iter().copied().reduce(f32::max)) {
                t.push(p);
            }
        }
    }
    for f in &sets.negatives {
        let s = &f.scores;
        for i in 0..s.len() {
            let left = i == 0 || s[i] >= s[i - 1];
            let right = i + 1 == s.len() || s[i] >= s[i + 1];
            if left && right {
                t.push(s[i]);
            }
        }
    }
    t.sort_by(f32::total_cmp);
    t.dedup();
    if t.len() > MAX_DET_POINTS {
        let n = t.len();
        t = (0..MAX_DET_POINTS).map(|i| t[i * (n - 1) / (MAX_DET_POINTS - 1)]).collect();
        t.dedup();
    }
    // one point above every score, where nothing fires
    let top = sets
        .positives
        .iter()
        .chain(&sets.negatives)
        .flat_map(|f| f.scores.iter().copied())
        .filter(|v| v.is_finite())
        .reduce(f32::max);
    if let Some(top) = top {
        if t.last().is_none_or(|&l| l <= top) {
            t.push(top.next_up());
        }
    }
    t
}

/// Sweeps `thresholds`. FRR never decreases with the threshold. Raw FA counts
/// can rise with the threshold when a merged event splits in two, so FA at
/// each threshold is the largest count at that threshold or any higher one.
pub fn det_curve(sets: &ScoredSets, thresholds: &[f32], refractory: usize) -> Result<DetCurve> {
    let hours = sets.negative_hours();
    if !(hours > 0.0) {
        return Err(Error::Empty("no negative audio".into()));
    }
    let mut ts: Vec<f32> = thresholds.to_vec();
    if ts.iter().any(|t| t.is_nan()) {
        return Err(Error::NonFinite("NaN threshold".into()));
    }
    ts.sort_by(f32::total_cmp);
    ts.dedup();
    let raw: Vec<(f64, usize)> = ts
        .par_iter()
        .map(|&t| raw_frr_fa(sets, t, refractory))
        .collect::<Result<_>>()?;
    let mut points: Vec<DetPoint> = Vec::with_capacity(ts.len());
    let mut fa_env = 0usize;
    for (&t, &(frr, fa)) in ts.iter().zip(&raw).rev() {
        fa_env = fa_env.max(fa);
        points.push(DetPoint {
            threshold: t,
            fa_per_hour: fa_env as f64 / hours,
            frr_percent: frr,
        });
    }
    points.reverse();
    Ok(DetCurve { points })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrrAtFa {
    pub frr_percent: f64,
    /// True when the target lies outside the curve's FA range and the nearest
    /// endpoint was used.
    pub clamped: bool,
}

/// FRR at `target` FA/hr, linearly interpolated in FA between the two curve
/// points that bracket it.
pub fn frr_at_fa(curve: &DetCurve, target: f64) -> Result<FrrAtFa> {
    let pts = &curve.points;
    if pts.is_empty() {
        return Err(Error::Empty("DET curve has no points".into()));
    }
    if let Some(p) = pts.iter().find(|p| p.fa_per_hour == target) {
        return Ok(FrrAtFa {
            frr_percent: p.frr_percent,
            clamped: false,
        });
    }
    // The last point still above the target and the first one below it.
    let above = pts.iter().rposition(|p| p.fa_per_hour > target);
    let below = pts.iter().position(|p| p.fa_per_hour < target);
    Ok(match (above, below) {
        (Some(a), Some(b)) => {
            let (pa, pb) = (pts[a], pts[b]);
            let f = (target - pa.fa_per_hour) / (pb.fa_per_hour - pa.fa_per_hour);
            FrrAtFa {
                frr_percent: pa.frr_percent + f * (pb.frr_percent - pa.frr_percent),
                clamped: false,
            }
        }
        (Some(a), None) => FrrAtFa {
            frr_percent: pts[a].frr_percent,
            clamped: true,
        },
        (None, Some(b)) => FrrAtFa {
            frr_percent: pts[b].frr_percent,
            clamped: true,
        },
        (None, None) => unreachable!("non-empty curve"),
    })
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs ordered
/// correctly, ties counting one half.
pub fn roc_auc(positive: &[f32], negative: &[f32]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::Empty("AUC needs positive and negative scores".into()));
    }
    if positive.iter().chain(negative).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    let mut neg = negative.to_vec();
    neg.sort_by(f32::total_cmp);
    let mut wins = 0f64;
    for &p in positive {
        let below = neg.partition_point(|&n| n < p);
        let not_above = neg.partition_point(|&n| n <= p);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(wins / (positive.len() as f64 * neg.len() as f64))
}

/// Peak per positive file and per `segment`-frame stretch of negative audio.
pub fn auc_peaks(sets: &ScoredSets, segment: usize) -> (Vec<f32>, Vec<f32>) {
    let pos = sets.positives.iter().filter_map(ScoredFile::peak).collect();
    let neg = sets
        .negatives
        .iter()
        .flat_map(|f| {
            f.scores
                .chunks(segment.max(1))
                .filter_map(|c| c.iter().copied().reduce(f32::max))
                .collect::<Vec<_>>()
        })
        .collect();
    (pos, neg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub num_positives: usize,
    pub num_negatives: usize,
    pub negative_hours: f64,
    pub fa_target: f64,
    pub frr_at_target: f64,
    pub target_clamped: bool,
    pub auc: f64,
    pub refractory: usize,
}

pub fn summarize(sets: &ScoredSets, fa_target: f64, refractory: usize) -> Result<(MetricSummary, DetCurve)> {
    let curve = det_curve(sets, &default_thresholds(sets), refractory)?;
    let at = frr_at_fa(&curve, fa_target)?;
    let (pos, neg) = auc_peaks(sets, refractory);
    let summary = MetricSummary {
        num_positives: sets.positives.len(),
        num_negatives: sets.negatives.len(),
        negative_hours: sets.negative_hours(),
        fa_target,
        frr_at_target: at.frr_percent,
        target_clamped: at.clamped,
        auc: roc_auc(&pos, &neg)?,
        refractory,
    };
    Ok((summary, curve))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::Data(e.to_string()))
}

/// CSV with columns `threshold,fa_per_hr,frr_pct`.
pub fn write_det_csv(curve: &DetCurve, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["threshold", "fa_per_hr", "frr_pct"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for p in &curve.points {
        w.write_record([p.threshold.to_string(), p.fa_per_hour.to_string(), p.frr_percent.to_string()])
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv(summary: &MetricSummary, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.serialize(summary).map_err(|e| Error::Data(e.to_string()))?;
    w.flush()?;
    Ok(())
}
