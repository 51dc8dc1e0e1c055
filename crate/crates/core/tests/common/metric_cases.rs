//! Metric oracles shared by the metric tests and the acceptance run. Each
//! returns `Err` with a description of the first mismatch.

use rand::Rng;
use repcnn::eval::{
    compute_frr_fa, default_thresholds, det_curve, detect_events, frr_at_fa, roc_auc, DetCurve, DetPoint,
    ScoredFile, ScoredSets,
};

pub fn brute_auc(pos: &[f32], neg: &[f32]) -> f64 {
    let mut wins = 0.0;
    for &p in pos {
        for &n in neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Scores drawn from a small grid so ties are common.
fn coarse_scores(r: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| r.gen_range(0..12) as f32 / 8.0).collect()
}

pub fn auc_matches_brute_force(r: &mut impl Rng, trials: usize) -> Result<(), String> {
    for i in 0..trials {
        let (np, nn) = (r.gen_range(1..30), r.gen_range(1..30));
        let pos = coarse_scores(r, np);
        let neg = coarse_scores(r, nn);
        let fast = roc_auc(&pos, &neg).map_err(|e| e.to_string())?;
        let slow = brute_auc(&pos, &neg);
        if fast != slow {
            return Err(format!("trial {i}: {fast} vs {slow}"));
        }
    }
    Ok(())
}

/// Groups supra-threshold frames the slow way: walk the frames and start a
/// new event whenever the gap since the previous supra-threshold frame
/// exceeds the refractory length.
pub fn brute_events(scores: &[f32], threshold: f32, refractory: usize) -> Vec<(usize, usize)> {
    let hits: Vec<usize> = (0..scores.len()).filter(|&t| scores[t] >= threshold).collect();
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &t in &hits {
        let joins = out.last().is_some_and(|&(_, e)| t - e <= refractory.max(1));
        if joins {
            out.last_mut().unwrap().1 = t;
        } else {
            out.push((t, t));
        }
    }
    out
}

fn file(id: &str, scores: &[f32], gt: Option<(usize, usize)>, seconds: f64) -> ScoredFile {
    ScoredFile {
        id: id.into(),
        scores: scores.to_vec(),
        ground_truth: gt,
        duration_seconds: seconds,
    }
}

/// Three keyword files and two half-hour negative files, counted by hand at
/// threshold 0.5 with a 3-frame refractory gap:
/// - p1 fires inside its range, p2 fires only before its range, p3 fires at
///   the range end, so FRR = 1/3;
/// - n1 has peaks at 0, 4 and 10 (gaps 4 and 6 exceed 3): 3 events;
/// - n2 has hits at 0, 1, 4 (gaps 1 and 3): 1 event;
/// - 4 false alarms over one hour.
pub fn hand_counted_sets() -> ScoredSets {
    ScoredSets {
        positives: vec![
            file("p1", &[0.0, 0.0, 0.9, 0.2, 0.0, 0.0], Some((2, 3)), 1.0),
            file("p2", &[0.7, 0.0, 0.0, 0.0, 0.0, 0.0], Some((4, 5)), 1.0),
            file("p3", &[0.0, 0.0, 0.0, 0.0, 0.4, 0.6], Some((3, 5)), 1.0),
        ],
        negatives: vec![
            file("n1", &[0.6, 0.0, 0.0, 0.0, 0.8, 0.0, 0.0, 0.0, 0.0, 0.0, 0.9], None, 1800.0),
            file("n2", &[0.55, 0.6, 0.0, 0.0, 0.7], None, 1800.0),
        ],
    }
}

pub fn hand_counted_toy() -> Result<(), String> {
    let sets = hand_counted_sets();
    let (frr, fa) = compute_frr_fa(&sets, 0.5, 3).map_err(|e| e.to_string())?;
    if (frr - 100.0 / 3.0).abs() > 1e-9 || fa != 4.0 {
        return Err(format!("threshold 0.5: FRR {frr}, FA/hr {fa}; hand count 33.33, 4"));
    }
    // above every score: nothing fires
    let (frr, fa) = compute_frr_fa(&sets, 1.0, 3).map_err(|e| e.to_string())?;
    if frr != 100.0 || fa != 0.0 {
        return Err(format!("threshold 1.0: FRR {frr}, FA/hr {fa}"));
    }
    // at 0.35 p3 adds frame 4 and n2 is one event, n1 still three
    let (frr, fa) = compute_frr_fa(&sets, 0.35, 3).map_err(|e| e.to_string())?;
    if (frr - 100.0 / 3.0).abs() > 1e-9 || fa != 4.0 {
        return Err(format!("threshold 0.35: FRR {frr}, FA/hr {fa}"));
    }
    // 0.85: p1 alone is detected, n1 keeps its last peak
    let (frr, fa) = compute_frr_fa(&sets, 0.85, 3).map_err(|e| e.to_string())?;
    if (frr - 200.0 / 3.0).abs() > 1e-9 || fa != 1.0 {
        return Err(format!("threshold 0.85: FRR {frr}, FA/hr {fa}"));
    }
    Ok(())
}

fn curve(points: &[(f64, f64)]) -> DetCurve {
    DetCurve {
        points: points
            .iter()
            .enumerate()
            .map(|(i, &(fa, frr))| DetPoint {
                threshold: i as f32,
                fa_per_hour: fa,
                frr_percent: frr,
            })
            .collect(),
    }
}

pub fn interpolation_cases() -> Result<(), String> {
    let check = |c: &DetCurve, target: f64, want: f64, clamped: bool| -> Result<(), String> {
        let got = frr_at_fa(c, target).map_err(|e| e.to_string())?;
        if (got.frr_percent - want).abs() > 1e-12 || got.clamped != clamped {
            return Err(format!("target {target}: got {got:?}, want {want} (clamped {clamped})"));
        }
        Ok(())
    };
    // points ordered by increasing threshold: FA falls, FRR rises
    let mid = curve(&[(4.0, 2.0), (2.0, 4.0)]);
    check(&mid, 3.0, 3.0, false)?;
    let exact = curve(&[(6.0, 1.0), (3.0, 2.5), (1.0, 7.0)]);
    check(&exact, 3.0, 2.5, false)?;
    check(&exact, 2.0, 4.75, false)?;
    check(&exact, 10.0, 1.0, true)?;
    check(&exact, 0.5, 7.0, true)?;
    Ok(())
}

/// Between one and four keyword files and one to three negatives, with
/// scores on a coarse grid and random ground-truth ranges.
pub fn random_sets(r: &mut impl Rng) -> ScoredSets {
    fn mk(r: &mut impl Rng, keyword: bool, i: usize) -> ScoredFile {
        let len = r.gen_range(1..40);
        let scores = coarse_scores(r, len);
        let gt = keyword.then(|| {
            let a = r.gen_range(0..len);
            (a, r.gen_range(a..len))
        });
        file(&format!("f{i}"), &scores, gt, r.gen_range(10.0..600.0))
    }
    let np = r.gen_range(1..5);
    let nn = r.gen_range(1..4);
    ScoredSets {
        positives: (0..np).map(|i| mk(r, true, i)).collect(),
        negatives: (0..nn).map(|i| mk(r, false, i)).collect(),
    }
}

pub fn det_monotone_on_random_sets(r: &mut impl Rng, sets: usize) -> Result<(), String> {
    for i in 0..sets {
        let s = random_sets(r);
        let refractory = r.gen_range(0..6);
        let c = det_curve(&s, &default_thresholds(&s), refractory).map_err(|e| e.to_string())?;
        for w in c.points.windows(2) {
            if !(w[0].threshold < w[1].threshold) || w[1].frr_percent < w[0].frr_percent || w[1].fa_per_hour > w[0].fa_per_hour
            {
                return Err(format!("set {i}: {:?} then {:?}", w[0], w[1]));
            }
        }
    }
    Ok(())
}

pub fn grouping_matches_brute_force(r: &mut impl Rng, trials: usize) -> Result<(), String> {
    for i in 0..trials {
        let len = r.gen_range(0..60);
        let scores = coarse_scores(r, len);
        let threshold = r.gen_range(0..12) as f32 / 8.0;
        let refractory = r.gen_range(0..12);
        let fast: Vec<(usize, usize)> = detect_events(&scores, threshold, refractory)
            .iter()
            .map(|e| (e.start, e.end))
            .collect();
        let slow = brute_events(&scores, threshold, refractory);
        if fast != slow {
            return Err(format!("trial {i}: {fast:?} vs {slow:?}"));
        }
    }
    Ok(())
}
