//! Detection metrics and benchmarks.

pub mod bench;
pub mod metrics;

pub use bench::{analytic_peak_bytes, bench, BenchConfig, BenchReport, BenchRow};
pub use metrics::{
    auc_peaks, compute_frr_fa, det_curve, default_thresholds, detect_events, frr_at_fa, ground_truth_emits, roc_auc,
    score_test_sets, summarize, write_det_csv, write_summary_csv, DetCurve, DetPoint, DetectionEvent, FrrAtFa,
    MetricSummary, ScoredFile, ScoredSets, DEFAULT_FA_TARGET, DEFAULT_REFRACTORY,
};
