//! Frame-by-frame detector.
//!
//! Per frame the detector runs one model step and may emit:
//!
//! - `forecast_start` / `forecast_end` when the confidence crosses its
//!   threshold from below (rising edge),
//! - `start` / `end` one frame after a local confidence peak at or above the
//!   threshold; the event's `anchor_frame` is the peak itself.
//!
//! Intervals are assembled when the stream ends: runs of the
//! majority-smoothed argmax class decide which actions exist, and nearby
//! start/end anchors refine their boundaries.

use serde::{Deserialize, Serialize};

use crate::dataset::{Interval, BLANK_CLASS};
use crate::error::{Error, Result};
use crate::network::{FrameOutput, Model, RecurrentState};
use crate::numerics::argmax;

/// Anything that produces one [`FrameOutput`] per input frame, causally.
pub trait StreamModel {
    type State: Clone;

    fn input_dim(&self) -> usize;
    fn initial_state(&self) -> Self::State;
    fn step(&self, state: &mut Self::State, x: &[f64]) -> Result<FrameOutput>;
}

impl StreamModel for Model {
    type State = RecurrentState;

    fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn initial_state(&self) -> RecurrentState {
        Model::initial_state(self)
    }

    fn step(&self, state: &mut RecurrentState, x: &[f64]) -> Result<FrameOutput> {
        Model::step(self, state, x)
    }
}

/// Replays fixed outputs regardless of the input values. Used to drive the
/// detector with hand-made confidence curves.
#[derive(Clone, Debug)]
pub struct ScriptedModel {
    pub input_dim: usize,
    pub outputs: Vec<FrameOutput>,
}

impl ScriptedModel {
    /// One-hot posteriors from `labels`, confidences from the two series.
    pub fn from_series(labels: &[usize], p_start: &[f64], p_end: &[f64], num_outputs: usize) -> Self {
        let outputs = labels
            .iter()
            .zip(p_start)
            .zip(p_end)
            .map(|((&k, &s), &e)| {
                let mut y = vec![0.0; num_outputs];
                y[k] = 1.0;
                FrameOutput { y, p_start: s, p_end: e }
            })
            .collect();
        ScriptedModel { input_dim: 1, outputs }
    }
}

impl StreamModel for ScriptedModel {
    type State = usize;

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn initial_state(&self) -> usize {
        0
    }

    fn step(&self, state: &mut usize, _x: &[f64]) -> Result<FrameOutput> {
        let out = self
            .outputs
            .get(*state)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("script has no frame {state}")))?;
        *state += 1;
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub theta_start: f64,
    pub theta_end: f64,
    /// Minimum distance between two start (or two end) anchors.
    pub peak_min_separation: usize,
    /// Odd window for the centered majority vote; 1 disables smoothing.
    pub smoothing_window: usize,
    pub min_segment_len: usize,
    /// Half-width of the anchor search around a run boundary.
    pub refine_radius: usize,
    /// How many frames before the actual start the classifier is trained to
    /// switch on; widens the start search window to the right.
    pub start_lead: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            theta_start: 0.5,
            theta_end: 0.5,
            peak_min_separation: 10,
            smoothing_window: 5,
            min_segment_len: 3,
            refine_radius: 10,
            start_lead: 10,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("detector: {m}")));
        if !(0.0..=1.0).contains(&self.theta_start) || !(0.0..=1.0).contains(&self.theta_end) {
            return bad("thresholds must be in [0, 1]");
        }
        if self.smoothing_window == 0 || self.smoothing_window % 2 == 0 {
            return bad("smoothing_window must be odd and >= 1");
        }
        if self.peak_min_separation == 0 || self.min_segment_len == 0 {
            return bad("peak_min_separation and min_segment_len must be >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ForecastStart,
    ForecastEnd,
    Start,
    End,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub kind: EventKind,
    pub class_id: usize,
    /// Frame at which the event was emitted.
    pub frame: usize,
    /// Peak frame for start/end, the crossing frame for forecasts.
    pub anchor_frame: usize,
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionDetection {
    pub class_id: usize,
    pub start: usize,
    pub end: usize,
}

impl ActionDetection {
    pub fn interval(&self) -> Interval {
        Interval::new(self.start, self.end)
    }
}

/// Peak and threshold bookkeeping for one confidence series.
#[derive(Clone, Debug, Default, PartialEq)]
struct PeakTracker {
    /// `p_{t-2}`, `p_{t-1}`.
    prev2: Option<f64>,
    prev1: Option<f64>,
    last_anchor: Option<usize>,
    last_emit: Option<usize>,
    anchors: Vec<usize>,
}

impl PeakTracker {
    /// Feeds `p_t`; returns `(confirmed peak (anchor, value), forecast fired)`.
    fn push(&mut self, t: usize, p: f64, theta: f64, sep: usize) -> (Option<(usize, f64)>, bool) {
        let mut peak = None;
        if let Some(p1) = self.prev1 {
            let rising = self.prev2.map_or(true, |p2| p2 <= p1);
            let anchor = t - 1;
            let far = self.last_anchor.map_or(true, |a| anchor - a >= sep);
            if rising && p1 > p && p1 >= theta && far {
                peak = Some((anchor, p1));
                self.last_anchor = Some(anchor);
                self.last_emit = Some(t);
                self.anchors.push(anchor);
            }
        }
        let crossed = p >= theta && self.prev1.map_or(true, |p1| p1 < theta);
        let quiet = self.last_emit.map_or(true, |e| t - e >= sep);
        let forecast = crossed && quiet;
        if forecast {
            self.last_emit = Some(t);
        }
        self.prev2 = self.prev1;
        self.prev1 = Some(p);
        (peak, forecast)
    }
}

#[derive(Clone, Debug)]
pub struct DetectorState<S> {
    pub model_state: S,
    /// Frames consumed so far.
    pub t: usize,
    /// Raw per-frame argmax labels.
    pub labels: Vec<usize>,
    pub events: Vec<DetectionEvent>,
    start: PeakTracker,
    end: PeakTracker,
}

pub struct Detector<'m, M: StreamModel> {
    model: &'m M,
    config: DetectorConfig,
    state: DetectorState<M::State>,
}

impl<'m, M: StreamModel> Detector<'m, M> {
    pub fn new(model: &'m M, config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let state = Self::fresh_state(model);
        Ok(Detector { model, config, state })
    }

    fn fresh_state(model: &M) -> DetectorState<M::State> {
        DetectorState {
            model_state: model.initial_state(),
            t: 0,
            labels: Vec::new(),
            events: Vec::new(),
            start: PeakTracker::default(),
            end: PeakTracker::default(),
        }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn state(&self) -> &DetectorState<M::State> {
        &self.state
    }

    pub fn events(&self) -> &[DetectionEvent] {
        &self.state.events
    }

    pub fn reset(&mut self) {
        self.state = Self::fresh_state(self.model);
    }

    pub fn step(&mut self, frame: &[f64]) -> Result<(FrameOutput, Vec<DetectionEvent>)> {
        if frame.len() != self.model.input_dim() {
            return Err(Error::Shape {
                op: "detector step",
                left: (frame.len(), 1),
                right: (self.model.input_dim(), 1),
            });
        }
        let out = self.model.step(&mut self.state.model_state, frame)?;
        let finite = out.y.iter().all(|v| v.is_finite()) && out.p_start.is_finite() && out.p_end.is_finite();
        if !finite {
            return Err(Error::NonFinite(format!("model output at frame {}", self.state.t)));
        }
        let t = self.state.t;
        self.state.labels.push(argmax(&out.y));

        let cfg = &self.config;
        let (start_peak, start_fc) =
            self.state.start.push(t, out.p_start, cfg.theta_start, cfg.peak_min_separation);
        let (end_peak, end_fc) = self.state.end.push(t, out.p_end, cfg.theta_end, cfg.peak_min_separation);

        let mut events = Vec::new();
        let class_at = |anchor: usize| majority_at(&self.state.labels, anchor, cfg.smoothing_window);
        if let Some((anchor, p)) = start_peak {
            events.push(DetectionEvent {
                kind: EventKind::Start,
                class_id: class_at(anchor),
                frame: t,
                anchor_frame: anchor,
                confidence: p,
            });
        }
        if let Some((anchor, p)) = end_peak {
            events.push(DetectionEvent {
                kind: EventKind::End,
                class_id: class_at(anchor),
                frame: t,
                anchor_frame: anchor,
                confidence: p,
            });
        }
        if start_fc {
            events.push(DetectionEvent {
                kind: EventKind::ForecastStart,
                class_id: class_at(t),
                frame: t,
                anchor_frame: t,
                confidence: out.p_start,
            });
        }
        if end_fc {
            events.push(DetectionEvent {
                kind: EventKind::ForecastEnd,
                class_id: class_at(t),
                frame: t,
                anchor_frame: t,
                confidence: out.p_end,
            });
        }
        self.state.events.extend(events.iter().cloned());
        self.state.t += 1;
        Ok((out, events))
    }

    /// Action intervals for everything seen so far.
    pub fn finalize(&self) -> Vec<ActionDetection> {
        assemble(
            &self.state.labels,
            &self.state.start.anchors,
            &self.state.end.anchors,
            &self.config,
        )
    }
}

/// Majority vote over the centered window at `center`, truncated to the
/// labels available. Ties go to the center label if it is among the
/// winners, else to the smallest class id.
pub fn majority_at(labels: &[usize], center: usize, window: usize) -> usize {
    let half = window / 2;
    let lo = center.saturating_sub(half);
    let hi = (center + half + 1).min(labels.len());
    let slice = &labels[lo..hi];
    let max_class = slice.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; max_class + 1];
    for &k in slice {
        counts[k] += 1;
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    let own = labels[center];
    if counts[own] == best {
        own
    } else {
        counts.iter().position(|&c| c == best).unwrap_or(BLANK_CLASS)
    }
}

pub fn smooth_labels(labels: &[usize], window: usize) -> Vec<usize> {
    (0..labels.len()).map(|t| majority_at(labels, t, window)).collect()
}

fn nearest(anchors: &[usize], target: usize, lo: usize, hi: usize) -> Option<usize> {
    anchors
        .iter()
        .copied()
        .filter(|&a| a >= lo && a <= hi)
        .min_by_key(|&a| (a.abs_diff(target), a))
}

/// Runs of the smoothed labels become detections; boundaries snap to the
/// nearest anchors in range.
pub fn assemble(
    labels: &[usize],
    start_anchors: &[usize],
    end_anchors: &[usize],
    cfg: &DetectorConfig,
) -> Vec<ActionDetection> {
    let smooth = smooth_labels(labels, cfg.smoothing_window);
    let mut out = Vec::new();
    let mut t = 0;
    while t < smooth.len() {
        let k = smooth[t];
        let mut e = t + 1;
        while e < smooth.len() && smooth[e] == k {
            e += 1;
        }
        if k != BLANK_CLASS && e - t >= cfg.min_segment_len {
            let r = cfg.refine_radius;
            let start = nearest(start_anchors, t, t.saturating_sub(r), t + cfg.start_lead + r).unwrap_or(t);
            // An end anchor marks the last action frame.
            let end = nearest(end_anchors, e - 1, (e - 1).saturating_sub(r), e - 1 + r)
                .map_or(e, |a| a + 1);
            let (start, end) = if start < end { (start, end) } else { (t, e) };
            out.push(ActionDetection { class_id: k, start, end });
        }
        t = e;
    }
    out
}

/// Everything the detector produced for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRun {
    pub outputs: Vec<FrameOutput>,
    pub events: Vec<DetectionEvent>,
    pub detections: Vec<ActionDetection>,
}

impl SequenceRun {
    /// One record per frame, identical to what the stream command prints.
    pub fn lines(&self) -> Vec<StreamLine> {
        let mut lines: Vec<StreamLine> = self
            .outputs
            .iter()
            .enumerate()
            .map(|(t, o)| StreamLine::new(t, o, Vec::new()))
            .collect();
        for e in &self.events {
            lines[e.frame].events.push(e.clone());
        }
        lines
    }
}

pub fn run_sequence<M: StreamModel>(model: &M, frames: &[Vec<f64>], cfg: &DetectorConfig) -> Result<SequenceRun> {
    let mut det = Detector::new(model, cfg.clone())?;
    let mut outputs = Vec::with_capacity(frames.len());
    for f in frames {
        outputs.push(det.step(f)?.0);
    }
    Ok(SequenceRun {
        outputs,
        detections: det.finalize(),
        events: det.state.events,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamLine {
    pub t: usize,
    pub argmax: usize,
    pub y: Vec<f64>,
    pub p_start: f64,
    pub p_end: f64,
    pub events: Vec<DetectionEvent>,
}

impl StreamLine {
    pub fn new(t: usize, out: &FrameOutput, events: Vec<DetectionEvent>) -> Self {
        StreamLine {
            t,
            argmax: out.argmax(),
            y: out.y.clone(),
            p_start: out.p_start,
            p_end: out.p_end,
            events,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("stream line serializes")
    }
}
