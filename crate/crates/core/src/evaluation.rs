//! Detection and forecast metrics.
//!
//! Interval F1, SL/EL and action-based F1 match within each sequence and
//! sum counts across sequences. Forecast precision/recall is counted per
//! frame by re-thresholding the stored confidence series.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{ActionAnnotation, Interval, BLANK_CLASS};
use crate::error::{Error, Result};
use crate::inference::{ActionDetection, DetectionEvent, EventKind};
use crate::network::FrameOutput;
use crate::targets::Boundary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub alpha_threshold: f64,
    pub action_f1_tolerance: usize,
    pub horizon: usize,
    pub threshold_grid: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            alpha_threshold: 0.6,
            action_f1_tolerance: 4,
            horizon: 10,
            threshold_grid: (0..=20).map(|i| i as f64 * 0.05).collect(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_threshold > 0.0 && self.alpha_threshold <= 1.0) {
            return Err(Error::Config("eval: alpha_threshold must be in (0, 1]".into()));
        }
        if self.threshold_grid.is_empty() {
            return Err(Error::Config("eval: threshold_grid is empty".into()));
        }
        if self.threshold_grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("eval: thresholds must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Intersection over union in frames; 0 when the union is empty.
pub fn overlap_ratio(a: Interval, b: Interval) -> f64 {
    let inter = a.intersection_len(&b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub detections: usize,
    pub groundtruth: usize,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.detections += other.detections;
        self.groundtruth += other.groundtruth;
    }

    pub fn score(&self) -> Prf {
        Prf::from_counts(self.tp, self.detections, self.groundtruth)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// Empty denominators give 0.
    pub fn from_counts(tp: usize, predicted: usize, actual: usize) -> Prf {
        let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        let recall = if actual == 0 { 0.0 } else { tp as f64 / actual as f64 };
        Prf {
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub detection: usize,
    pub groundtruth: usize,
    pub alpha: f64,
}

/// Same-class pairs with overlap above the threshold, taken greedily by
/// descending overlap; each side is used at most once.
pub fn match_detections(
    detections: &[ActionDetection],
    groundtruth: &[ActionAnnotation],
    alpha_threshold: f64,
) -> Vec<Match> {
    let mut candidates = Vec::new();
    for (i, d) in detections.iter().enumerate() {
        for (j, g) in groundtruth.iter().enumerate() {
            if d.class_id != g.class_id {
                continue;
            }
            let alpha = overlap_ratio(d.interval(), g.interval());
            if alpha > alpha_threshold {
                candidates.push(Match { detection: i, groundtruth: j, alpha });
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.alpha
            .total_cmp(&a.alpha)
            .then(a.detection.cmp(&b.detection))
            .then(a.groundtruth.cmp(&b.groundtruth))
    });
    greedy(candidates, detections.len(), groundtruth.len())
}

fn greedy(candidates: Vec<Match>, n_det: usize, n_gt: usize) -> Vec<Match> {
    let mut det_used = vec![false; n_det];
    let mut gt_used = vec![false; n_gt];
    let mut out = Vec::new();
    for m in candidates {
        if !det_used[m.detection] && !gt_used[m.groundtruth] {
            det_used[m.detection] = true;
            gt_used[m.groundtruth] = true;
            out.push(m);
        }
    }
    out
}

/// Per-class counts for one sequence.
pub fn class_counts(
    detections: &[ActionDetection],
    groundtruth: &[ActionAnnotation],
    alpha_threshold: f64,
) -> BTreeMap<usize, Counts> {
    let mut counts: BTreeMap<usize, Counts> = BTreeMap::new();
    for d in detections {
        counts.entry(d.class_id).or_default().detections += 1;
    }
    for g in groundtruth {
        counts.entry(g.class_id).or_default().groundtruth += 1;
    }
    for m in match_detections(detections, groundtruth, alpha_threshold) {
        counts.entry(groundtruth[m.groundtruth].class_id).or_default().tp += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class_id: usize,
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_class: Vec<ClassScore>,
    /// Mean over classes present in either the ground truth or the detections.
    pub average_f1: f64,
}

pub fn f1_report(counts: &BTreeMap<usize, Counts>) -> F1Report {
    let per_class: Vec<ClassScore> = counts
        .iter()
        .map(|(&class_id, c)| {
            let s = c.score();
            ClassScore {
                class_id,
                counts: *c,
                precision: s.precision,
                recall: s.recall,
                f1: s.f1,
            }
        })
        .collect();
    let average_f1 = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|c| c.f1).sum::<f64>() / per_class.len() as f64
    };
    F1Report { per_class, average_f1 }
}

pub fn match_and_f1(
    detections: &[ActionDetection],
    groundtruth: &[ActionAnnotation],
    alpha_threshold: f64,
) -> F1Report {
    f1_report(&class_counts(detections, groundtruth, alpha_threshold))
}

/// Numerators and shared denominator of SL/EL, summable across sequences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSums {
    pub sl: f64,
    pub el: f64,
    /// Ground-truth instances plus false positives.
    pub denominator: usize,
}

impl LocalizationSums {
    pub fn add(&mut self, other: LocalizationSums) {
        self.sl += other.sl;
        self.el += other.el;
        self.denominator += other.denominator;
    }

    pub fn scores(&self) -> (f64, f64) {
        if self.denominator == 0 {
            return (0.0, 0.0);
        }
        let d = self.denominator as f64;
        (self.sl / d, self.el / d)
    }
}

pub fn boundary_score(predicted: usize, actual: usize, action_len: usize) -> f64 {
    (-(predicted.abs_diff(actual) as f64) / action_len as f64).exp()
}

pub fn localization_sums(
    detections: &[ActionDetection],
    groundtruth: &[ActionAnnotation],
    alpha_threshold: f64,
) -> LocalizationSums {
    let matches = match_detections(detections, groundtruth, alpha_threshold);
    let mut sums = LocalizationSums {
        denominator: groundtruth.len() + detections.len() - matches.len(),
        ..LocalizationSums::default()
    };
    for m in &matches {
        let d = &detections[m.detection];
        let g = &groundtruth[m.groundtruth];
        let len = g.end - g.start;
        sums.sl += boundary_score(d.start, g.start, len);
        sums.el += boundary_score(d.end, g.end, len);
    }
    sums
}

pub fn sl_el_scores(
    detections: &[ActionDetection],
    groundtruth: &[ActionAnnotation],
    alpha_threshold: f64,
) -> (f64, f64) {
    localization_sums(detections, groundtruth, alpha_threshold).scores()
}

/// Counts for the start-point criterion: same class and start within
/// `tolerance` frames; nearest starts are paired first.
pub fn action_counts(detections: &[ActionDetection], groundtruth: &[ActionAnnotation], tolerance: usize) -> Counts {
    let mut candidates = Vec::new();
    for (i, d) in detections.iter().enumerate() {
        for (j, g) in groundtruth.iter().enumerate() {
            let dist = d.start.abs_diff(g.start);
            if d.class_id == g.class_id && dist <= tolerance {
                candidates.push((dist, i, j));
            }
        }
    }
    candidates.sort();
    let matches = greedy(
        candidates
            .into_iter()
            .map(|(_, i, j)| Match { detection: i, groundtruth: j, alpha: 0.0 })
            .collect(),
        detections.len(),
        groundtruth.len(),
    );
    Counts {
        tp: matches.len(),
        detections: detections.len(),
        groundtruth: groundtruth.len(),
    }
}

pub fn action_based_f1(detections: &[ActionDetection], groundtruth: &[ActionAnnotation], tolerance: usize) -> f64 {
    action_counts(detections, groundtruth, tolerance).score().f1
}

/// Frames `[anchor - horizon, anchor]` (clipped to the sequence) in which a
/// forecast of this boundary counts.
pub fn forecast_window(a: &ActionAnnotation, kind: Boundary, horizon: usize, len: usize) -> Interval {
    let anchor = kind.anchor(a);
    Interval::new(anchor.saturating_sub(horizon), (anchor + 1).min(len))
}

/// Per-frame inputs to the forecast sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastSeries {
    pub p_start: Vec<f64>,
    pub p_end: Vec<f64>,
    /// Most probable action class (blank excluded) per frame.
    pub classes: Vec<usize>,
}

impl ForecastSeries {
    pub fn from_outputs(outputs: &[FrameOutput]) -> Self {
        ForecastSeries {
            p_start: outputs.iter().map(|o| o.p_start).collect(),
            p_end: outputs.iter().map(|o| o.p_end).collect(),
            classes: outputs.iter().map(|o| action_argmax(&o.y)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    fn series(&self, kind: Boundary) -> &[f64] {
        match kind {
            Boundary::Start => &self.p_start,
            Boundary::End => &self.p_end,
        }
    }
}

/// Argmax over the action classes only (index 1 and up). First wins ties.
pub fn action_argmax(y: &[f64]) -> usize {
    let mut best = 1.min(y.len().saturating_sub(1));
    for k in 1..y.len() {
        if y[k] > y[best] {
            best = k;
        }
    }
    best
}

/// Frame `t` forecasts when the confidence is at least `theta` and still
/// rising or flat (ahead of its peak).
pub fn is_forecast(p: &[f64], t: usize, theta: f64) -> bool {
    p[t] >= theta && (t == 0 || p[t] >= p[t - 1])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForecastCounts {
    pub predicted: usize,
    /// Predicted frames inside a window of an action of the predicted class.
    pub correct: usize,
    /// Window frames, one set per action.
    pub window_frames: usize,
    /// Window frames carrying a correct forecast.
    pub covered: usize,
}

impl ForecastCounts {
    pub fn add(&mut self, o: ForecastCounts) {
        self.predicted += o.predicted;
        self.correct += o.correct;
        self.window_frames += o.window_frames;
        self.covered += o.covered;
    }

    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            0.0
        } else {
            self.correct as f64 / self.predicted as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.window_frames == 0 {
            0.0
        } else {
            self.covered as f64 / self.window_frames as f64
        }
    }
}

pub fn forecast_counts(
    series: &ForecastSeries,
    groundtruth: &[ActionAnnotation],
    kind: Boundary,
    horizon: usize,
    theta: f64,
) -> ForecastCounts {
    let p = series.series(kind);
    let n = series.len();
    let windows: Vec<(usize, Interval)> = groundtruth
        .iter()
        .map(|a| (a.class_id, forecast_window(a, kind, horizon, n)))
        .collect();
    let mut c = ForecastCounts::default();
    for (_, w) in &windows {
        c.window_frames += w.len();
    }
    for t in 0..n {
        if !is_forecast(p, t, theta) {
            continue;
        }
        c.predicted += 1;
        let g = series.classes[t];
        let hits = windows.iter().filter(|(k, w)| *k == g && w.contains(t)).count();
        if hits > 0 {
            c.correct += 1;
            c.covered += hits;
        }
    }
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub theta: f64,
    pub precision: f64,
    pub recall: f64,
}

/// One PR point per threshold for a single sequence.
pub fn forecast_pr(
    series: &ForecastSeries,
    groundtruth: &[ActionAnnotation],
    kind: Boundary,
    horizon: usize,
    grid: &[f64],
) -> Result<Vec<PrPoint>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty threshold grid".into()));
    }
    Ok(grid
        .iter()
        .map(|&theta| {
            let c = forecast_counts(series, groundtruth, kind, horizon, theta);
            PrPoint {
                theta,
                precision: c.precision(),
                recall: c.recall(),
            }
        })
        .collect())
}

/// Rows: class of the ground-truth start window containing the forecast
/// (blank when none). Columns: forecast class.
pub fn forecast_confusion(
    events: &[DetectionEvent],
    groundtruth: &[ActionAnnotation],
    horizon: usize,
    num_outputs: usize,
) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; num_outputs]; num_outputs];
    add_confusion(&mut m, events, groundtruth, horizon);
    m
}

fn add_confusion(m: &mut [Vec<usize>], events: &[DetectionEvent], groundtruth: &[ActionAnnotation], horizon: usize) {
    for e in events.iter().filter(|e| e.kind == EventKind::ForecastStart) {
        let row = groundtruth
            .iter()
            .find(|a| forecast_window(a, Boundary::Start, horizon, usize::MAX).contains(e.frame))
            .map_or(BLANK_CLASS, |a| a.class_id);
        if row < m.len() && e.class_id < m.len() {
            m[row][e.class_id] += 1;
        }
    }
}

/// Everything needed to score one sequence.
#[derive(Clone, Debug)]
pub struct SequenceEval<'a> {
    pub annotations: &'a [ActionAnnotation],
    pub detections: &'a [ActionDetection],
    pub events: &'a [DetectionEvent],
    pub outputs: &'a [FrameOutput],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_sequences: usize,
    pub num_frames: usize,
    pub per_class: Vec<ClassScore>,
    pub average_f1: f64,
    pub sl_score: f64,
    pub el_score: f64,
    pub action_f1: Prf,
    pub forecast_start: Vec<PrPoint>,
    pub forecast_end: Vec<PrPoint>,
    pub forecast_confusion: Vec<Vec<usize>>,
}

pub fn evaluate(seqs: &[SequenceEval<'_>], num_outputs: usize, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut counts: BTreeMap<usize, Counts> = BTreeMap::new();
    let mut loc = LocalizationSums::default();
    let mut action = Counts::default();
    let grid = &cfg.threshold_grid;
    let mut fc_start = vec![ForecastCounts::default(); grid.len()];
    let mut fc_end = vec![ForecastCounts::default(); grid.len()];
    let mut confusion = vec![vec![0; num_outputs]; num_outputs];
    let mut frames = 0;

    for s in seqs {
        for (k, c) in class_counts(s.detections, s.annotations, cfg.alpha_threshold) {
            counts.entry(k).or_default().add(c);
        }
        loc.add(localization_sums(s.detections, s.annotations, cfg.alpha_threshold));
        action.add(action_counts(s.detections, s.annotations, cfg.action_f1_tolerance));
        let series = ForecastSeries::from_outputs(s.outputs);
        for (i, &theta) in grid.iter().enumerate() {
            fc_start[i].add(forecast_counts(&series, s.annotations, Boundary::Start, cfg.horizon, theta));
            fc_end[i].add(forecast_counts(&series, s.annotations, Boundary::End, cfg.horizon, theta));
        }
        add_confusion(&mut confusion, s.events, s.annotations, cfg.horizon);
        frames += s.outputs.len();
    }

    let f1s = f1_report(&counts);
    let (sl_score, el_score) = loc.scores();
    let points = |fc: &[ForecastCounts]| -> Vec<PrPoint> {
        grid.iter()
            .zip(fc)
            .map(|(&theta, c)| PrPoint {
                theta,
                precision: c.precision(),
                recall: c.recall(),
            })
            .collect()
    };
    Ok(EvalReport {
        num_sequences: seqs.len(),
        num_frames: frames,
        per_class: f1s.per_class,
        average_f1: f1s.average_f1,
        sl_score,
        el_score,
        action_f1: action.score(),
        forecast_start: points(&fc_start),
        forecast_end: points(&fc_end),
        forecast_confusion: confusion,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<EvalReport> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("eval report: {e}")))
    }

    pub fn pr_csv(&self) -> String {
        let mut out = String::from("kind,theta,precision,recall\n");
        for (kind, pts) in [("start", &self.forecast_start), ("end", &self.forecast_end)] {
            for p in pts {
                out.push_str(&format!("{kind},{},{},{}\n", p.theta, p.precision, p.recall));
            }
        }
        out
    }

    pub fn confusion_csv(&self) -> String {
        let n = self.forecast_confusion.len();
        let mut out = String::from("groundtruth");
        for k in 0..n {
            out.push_str(&format!(",pred_{k}"));
        }
        out.push('\n');
        for (k, row) in self.forecast_confusion.iter().enumerate() {
            out.push_str(&k.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    /// Every stored F1 agrees with its own precision and recall.
    pub fn is_consistent(&self) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
        self.per_class.iter().all(|c| close(c.f1, f1(c.precision, c.recall)))
            && close(self.action_f1.f1, f1(self.action_f1.precision, self.action_f1.recall))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn ann(class_id: usize, start: usize, end: usize) -> ActionAnnotation {
        ActionAnnotation { class_id, start, end }
    }

    fn det(class_id: usize, start: usize, end: usize) -> ActionDetection {
        ActionDetection { class_id, start, end }
    }

    fn as_dets(gt: &[ActionAnnotation]) -> Vec<ActionDetection> {
        gt.iter().map(|a| det(a.class_id, a.start, a.end)).collect()
    }

    #[test]
    fn overlap_examples() {
        let a = Interval::new(10, 20);
        assert_eq!(overlap_ratio(a, a), 1.0);
        assert_eq!(overlap_ratio(a, Interval::new(12, 22)), 8.0 / 12.0);
        assert!((overlap_ratio(a, Interval::new(12, 22)) - 0.6667).abs() < 1e-4);
        assert_eq!(overlap_ratio(a, Interval::new(20, 30)), 0.0);
        assert_eq!(overlap_ratio(a, Interval::new(0, 5)), 0.0);
    }

    #[test]
    fn perfect_and_empty_detection_sets() {
        let gt = vec![ann(1, 0, 10), ann(2, 20, 35), ann(1, 40, 50)];
        let r = match_and_f1(&as_dets(&gt), &gt, 0.6);
        assert!(r.per_class.iter().all(|c| c.f1 == 1.0));
        assert_eq!(r.average_f1, 1.0);
        assert_eq!(sl_el_scores(&as_dets(&gt), &gt, 0.6), (1.0, 1.0));
        assert_eq!(action_based_f1(&as_dets(&gt), &gt, 4), 1.0);

        let r = match_and_f1(&[], &gt, 0.6);
        for c in &r.per_class {
            assert_eq!((c.precision, c.recall, c.f1), (0.0, 0.0, 0.0));
        }
        assert_eq!(sl_el_scores(&[], &gt, 0.6), (0.0, 0.0));
    }

    #[test]
    fn threshold_is_strict() {
        // IoU exactly 0.6 does not count.
        let gt = vec![ann(1, 0, 10)];
        let d = vec![det(1, 0, 6)];
        assert_eq!(overlap_ratio(d[0].interval(), gt[0].interval()), 0.6);
        assert_eq!(match_and_f1(&d, &gt, 0.6).average_f1, 0.0);
        assert_eq!(match_and_f1(&d, &gt, 0.59).average_f1, 1.0);
    }

    #[test]
    fn wrong_class_never_matches() {
        let gt = vec![ann(1, 0, 10)];
        let r = match_and_f1(&[det(2, 0, 10)], &gt, 0.6);
        assert_eq!(r.per_class.len(), 2);
        assert_eq!(r.average_f1, 0.0);
    }

    #[test]
    fn sl_closed_forms() {
        let gt = vec![ann(1, 100, 140)];
        // Late by the full length: exp(-1).
        let late = boundary_score(140, 100, 40);
        assert!((late - (-1.0f64).exp()).abs() < 1e-15);
        assert!((late - 0.367879).abs() < 1e-6);
        // Start late by 8 and end early by 4 on a 40-frame action.
        let (sl, el) = sl_el_scores(&[det(1, 108, 136)], &gt, 0.6);
        assert!((sl - (-0.2f64).exp()).abs() < 1e-15);
        assert!((el - (-0.1f64).exp()).abs() < 1e-15);
        // One perfect match plus one false positive.
        let (sl, el) = sl_el_scores(&[det(1, 100, 140), det(2, 0, 20)], &gt, 0.6);
        assert_eq!((sl, el), (0.5, 0.5));
        // A miss counts in the denominator too.
        let gt2 = vec![ann(1, 100, 140), ann(1, 200, 220)];
        assert_eq!(sl_el_scores(&[det(1, 100, 140)], &gt2, 0.6), (0.5, 0.5));
    }

    #[test]
    fn action_f1_boundary_and_hand_case() {
        let gt = vec![ann(1, 10, 30)];
        assert_eq!(action_based_f1(&[det(1, 14, 30)], &gt, 4), 1.0);
        assert_eq!(action_based_f1(&[det(1, 15, 30)], &gt, 4), 0.0);

        // Three actions, three detections:
        //   class 1 at 3 (gt 0): hit
        //   class 2 at 50 (gt 44): miss, off by 6
        //   class 1 at 98 (gt class 3 at 100): wrong class
        // tp 1, precision 1/3, recall 1/3, f1 1/3.
        let gt = vec![ann(1, 0, 20), ann(2, 44, 70), ann(3, 100, 130)];
        let d = vec![det(1, 3, 20), det(2, 50, 70), det(1, 98, 130)];
        let c = action_counts(&d, &gt, 4);
        assert_eq!(c, Counts { tp: 1, detections: 3, groundtruth: 3 });
        assert!((action_based_f1(&d, &gt, 4) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn duplicates_only_match_once() {
        let gt = vec![ann(1, 0, 10)];
        let d = vec![det(1, 0, 10), det(1, 0, 9)];
        let r = match_and_f1(&d, &gt, 0.6);
        assert_eq!(r.per_class[0].counts, Counts { tp: 1, detections: 2, groundtruth: 1 });
        assert!((r.average_f1 - 2.0 / 3.0).abs() < 1e-15);
        // The better overlap wins the pairing.
        let m = match_detections(&d, &gt, 0.6);
        assert_eq!(m[0].detection, 0);
    }

    fn toy_series() -> (ForecastSeries, Vec<ActionAnnotation>) {
        // 40 frames, action class 1 at [10, 20), class 2 at [30, 38); T = 3.
        // Start windows: [7, 10] and [27, 30].
        let mut p = vec![0.0; 40];
        for (t, v) in [(6, 0.4), (7, 0.5), (8, 0.8), (9, 0.9), (10, 1.0), (11, 0.2)] {
            p[t] = v;
        }
        for (t, v) in [(26, 0.35), (27, 0.6), (28, 0.65), (29, 0.5)] {
            p[t] = v;
        }
        let mut classes = vec![1; 40];
        classes[26..30].iter_mut().for_each(|k| *k = 2);
        classes[27] = 1;
        let series = ForecastSeries {
            p_start: p,
            p_end: vec![0.0; 40],
            classes,
        };
        (series, vec![ann(1, 10, 20), ann(2, 30, 38)])
    }

    #[test]
    fn forecast_pr_hand_enumeration() {
        let (series, gt) = toy_series();
        let pr = forecast_pr(&series, &gt, Boundary::Start, 3, &[0.3, 0.7]).unwrap();
        // theta 0.3, rising frames >= 0.3: 6, 7, 8, 9, 10, 26, 27, 28 (29 falls).
        //   correct: 7, 8, 9, 10 (class 1 in [7, 10]), 28 (class 2 in [27, 30]);
        //   26 is outside, 27 has the wrong class. precision 5/8, recall 5/8.
        assert_eq!(pr[0].precision, 5.0 / 8.0);
        assert_eq!(pr[0].recall, 5.0 / 8.0);
        // theta 0.7: 8, 9, 10, all correct. precision 1, recall 3/8.
        assert_eq!(pr[1].precision, 1.0);
        assert_eq!(pr[1].recall, 3.0 / 8.0);
    }

    #[test]
    fn forecast_degenerate_thresholds() {
        let (mut series, gt) = toy_series();
        let pr = forecast_pr(&series, &gt, Boundary::Start, 3, &[1.0 + 1e-9]).unwrap();
        assert_eq!((pr[0].precision, pr[0].recall), (0.0, 0.0));
        assert!(forecast_pr(&series, &gt, Boundary::Start, 3, &[]).is_err());

        // Strictly increasing positive confidence with correct classes in the
        // windows: theta 0 forecasts every frame and covers every window frame.
        series.p_start = (0..40).map(|t| 0.01 + t as f64 * 0.01).collect();
        series.classes = vec![1; 40];
        series.classes[25..31].iter_mut().for_each(|k| *k = 2);
        let c = forecast_counts(&series, &gt, Boundary::Start, 3, 0.0);
        assert_eq!(c.recall(), 1.0);
        assert_eq!(c.predicted, 40);
        assert!(c.precision() <= 8.0 / 40.0);
    }

    #[test]
    fn end_windows_anchor_on_the_last_frame() {
        let a = ann(1, 10, 20);
        assert_eq!(forecast_window(&a, Boundary::End, 3, 100), Interval::new(16, 20));
        assert_eq!(forecast_window(&a, Boundary::Start, 3, 100), Interval::new(7, 11));
        // Clipped at the sequence start.
        assert_eq!(forecast_window(&ann(1, 1, 5), Boundary::Start, 3, 100), Interval::new(0, 2));
    }

    fn fc_event(frame: usize, class_id: usize) -> DetectionEvent {
        DetectionEvent {
            kind: EventKind::ForecastStart,
            class_id,
            frame,
            anchor_frame: frame,
            confidence: 0.9,
        }
    }

    #[test]
    fn confusion_counts() {
        let gt = vec![ann(1, 10, 20), ann(2, 30, 38)];
        let all_right = [fc_event(8, 1), fc_event(29, 2)];
        let m = forecast_confusion(&all_right, &gt, 3, 3);
        assert_eq!(m, vec![vec![0, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        // One confusion (2 forecast as 1) and one forecast outside every window.
        let mixed = [fc_event(8, 1), fc_event(28, 1), fc_event(50, 2)];
        let m = forecast_confusion(&mixed, &gt, 3, 3);
        assert_eq!(m, vec![vec![0, 0, 1], vec![0, 1, 0], vec![0, 1, 0]]);
    }

    #[test]
    fn report_csvs_and_consistency() {
        let gt = vec![ann(1, 10, 20)];
        let outputs = vec![FrameOutput { y: vec![0.0, 1.0], p_start: 0.2, p_end: 0.1 }; 30];
        let dets = as_dets(&gt);
        let seq = SequenceEval {
            annotations: &gt,
            detections: &dets,
            events: &[],
            outputs: &outputs,
        };
        let r = evaluate(&[seq], 2, &EvalConfig::default()).unwrap();
        assert!(r.is_consistent());
        assert_eq!(r.average_f1, 1.0);
        assert_eq!(r.num_frames, 30);
        let csv = r.pr_csv();
        assert_eq!(csv.lines().count(), 1 + 2 * 21);
        assert!(csv.starts_with("kind,theta,precision,recall\nstart,0,"));
        assert_eq!(r.confusion_csv(), "groundtruth,pred_0,pred_1\n0,0,0\n1,0,0\n");
        let back = EvalReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    /// Random disjoint ground truth and arbitrary detections.
    fn instance(rng: &mut Rng, min_len: usize) -> (Vec<ActionDetection>, Vec<ActionAnnotation>) {
        let n_gt = rng.below(5);
        let mut gt = Vec::new();
        let mut t = rng.below(5);
        for _ in 0..n_gt {
            let len = min_len + rng.below(12);
            gt.push(ann(1 + rng.below(2), t, t + len));
            t += len + rng.below(6);
        }
        let n_det = rng.below(5);
        let dets = (0..n_det)
            .map(|_| {
                let s = rng.below(t + 5);
                det(1 + rng.below(2), s, s + 1 + rng.below(min_len + 12))
            })
            .collect();
        (dets, gt)
    }

    /// Every partial one-to-one assignment; calls `f` with the pairs.
    fn for_each_assignment(n_det: usize, n_gt: usize, f: &mut dyn FnMut(&[(usize, usize)])) {
        fn rec(d: usize, n_det: usize, n_gt: usize, used: &mut Vec<bool>, cur: &mut Vec<(usize, usize)>, f: &mut dyn FnMut(&[(usize, usize)])) {
            if d == n_det {
                f(cur);
                return;
            }
            rec(d + 1, n_det, n_gt, used, cur, f);
            for g in 0..n_gt {
                if !used[g] {
                    used[g] = true;
                    cur.push((d, g));
                    rec(d + 1, n_det, n_gt, used, cur, f);
                    cur.pop();
                    used[g] = false;
                }
            }
        }
        rec(0, n_det, n_gt, &mut vec![false; n_gt], &mut Vec::new(), f);
    }

    fn frame_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
        let hi = a.1.max(b.1);
        let (mut inter, mut union) = (0, 0);
        for t in 0..hi {
            let ia = t >= a.0 && t < a.1;
            let ib = t >= b.0 && t < b.1;
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
        if union == 0 { 0.0 } else { inter as f64 / union as f64 }
    }

    #[test]
    fn metrics_match_exhaustive_oracles() {
        let mut rng = Rng::new(2024);
        for _ in 0..200 {
            let (dets, gt) = instance(&mut rng, 9);
            for (d, g) in dets.iter().zip(&gt) {
                assert_eq!(overlap_ratio(d.interval(), g.interval()), frame_iou((d.start, d.end), (g.start, g.end)));
            }
            // Best assignment: most pairs, then largest total overlap.
            let valid = |d: usize, g: usize| dets[d].class_id == gt[g].class_id && frame_iou((dets[d].start, dets[d].end), (gt[g].start, gt[g].end)) > 0.6;
            let mut best_tp = 0;
            let mut best_alpha = 0.0;
            let mut best_sl: Vec<(f64, f64)> = Vec::new();
            for_each_assignment(dets.len(), gt.len(), &mut |pairs| {
                if !pairs.iter().all(|&(d, g)| valid(d, g)) {
                    return;
                }
                let alpha: f64 = pairs.iter().map(|&(d, g)| frame_iou((dets[d].start, dets[d].end), (gt[g].start, gt[g].end))).sum();
                let mut sl = 0.0;
                let mut el = 0.0;
                for &(d, g) in pairs {
                    let len = (gt[g].end - gt[g].start) as f64;
                    sl += (-((dets[d].start as f64 - gt[g].start as f64).abs()) / len).exp();
                    el += (-((dets[d].end as f64 - gt[g].end as f64).abs()) / len).exp();
                }
                let denom = (gt.len() + dets.len() - pairs.len()) as f64;
                let score = if denom == 0.0 { (0.0, 0.0) } else { (sl / denom, el / denom) };
                if pairs.len() > best_tp || (pairs.len() == best_tp && alpha > best_alpha + 1e-12) {
                    best_tp = pairs.len();
                    best_alpha = alpha;
                    best_sl = vec![score];
                } else if pairs.len() == best_tp && (alpha - best_alpha).abs() <= 1e-12 {
                    best_sl.push(score);
                }
            });
            let r = match_and_f1(&dets, &gt, 0.6);
            let tp: usize = r.per_class.iter().map(|c| c.counts.tp).sum();
            assert_eq!(tp, best_tp, "{dets:?} {gt:?}");
            let (sl, el) = sl_el_scores(&dets, &gt, 0.6);
            assert!(best_sl.iter().any(|&(a, b)| (a - sl).abs() < 1e-12 && (b - el).abs() < 1e-12));

            // Start-point criterion: best cardinality over all assignments.
            let mut best_action = 0;
            for_each_assignment(dets.len(), gt.len(), &mut |pairs| {
                if pairs.iter().all(|&(d, g)| dets[d].class_id == gt[g].class_id && (dets[d].start as i64 - gt[g].start as i64).abs() <= 4) {
                    best_action = best_action.max(pairs.len());
                }
            });
            assert_eq!(action_counts(&dets, &gt, 4).tp, best_action);
            assert!(r.per_class.iter().all(|c| (c.f1 - f1(c.precision, c.recall)).abs() < 1e-15));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn overlap_is_symmetric_and_bounded(a in 0usize..50, la in 1usize..30, b in 0usize..50, lb in 1usize..30) {
            let x = Interval::new(a, a + la);
            let y = Interval::new(b, b + lb);
            let r = overlap_ratio(x, y);
            prop_assert!(r == overlap_ratio(y, x));
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!((r == 1.0) == (a == b && la == lb));
        }

        #[test]
        fn f1_bounded_by_twice_min(seed in 0u64..100_000) {
            let (dets, gt) = instance(&mut Rng::new(seed), 3);
            for c in match_and_f1(&dets, &gt, 0.6).per_class {
                prop_assert!(c.f1 <= 2.0 * c.precision.min(c.recall) + 1e-15);
            }
        }

        #[test]
        fn false_positives_never_help_localization(seed in 0u64..100_000) {
            let mut rng = Rng::new(seed);
            let (dets, gt) = instance(&mut rng, 3);
            let (sl, el) = sl_el_scores(&dets, &gt, 0.6);
            prop_assert!((0.0..=1.0).contains(&sl) && (0.0..=1.0).contains(&el));
            // A detection far from everything is always a false positive.
            let mut more = dets.clone();
            more.push(det(1, 10_000, 10_010));
            let (sl2, el2) = sl_el_scores(&more, &gt, 0.6);
            prop_assert!(sl2 <= sl && el2 <= el);
            // A perfectly placed detection for a new action never hurts.
            let mut gt2 = gt.clone();
            gt2.push(ann(2, 20_000, 20_010));
            let mut dets2 = dets.clone();
            dets2.push(det(2, 20_000, 20_010));
            let (sl3, el3) = sl_el_scores(&dets2, &gt2, 0.6);
            prop_assert!(sl3 >= sl - 1e-15 && el3 >= el - 1e-15);
        }

        #[test]
        fn recall_is_monotone_in_theta(seed in 0u64..100_000) {
            let mut rng = Rng::new(seed);
            let n = 60;
            let series = ForecastSeries {
                p_start: (0..n).map(|_| rng.next_f64()).collect(),
                p_end: (0..n).map(|_| rng.next_f64()).collect(),
                classes: (0..n).map(|_| 1 + rng.below(2)).collect(),
            };
            let gt = vec![ann(1, 12, 25), ann(2, 30, 50)];
            let grid = EvalConfig::default().threshold_grid;
            for kind in [Boundary::Start, Boundary::End] {
                let pr = forecast_pr(&series, &gt, kind, 10, &grid).unwrap();
                for w in pr.windows(2) {
                    prop_assert!(w[1].recall <= w[0].recall);
                }
            }
        }
    }
}
