//! Per-frame training targets: forecast-shifted class labels and Gaussian
//! start/end confidence curves.

use serde::{Deserialize, Serialize};

use crate::dataset::{ActionAnnotation, SkeletonSequence, BLANK_CLASS};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetConfig {
    /// Width of the confidence curve, in frames.
    pub sigma: f64,
    /// Forecast horizon: labels switch to the action class this many frames early.
    pub horizon: usize,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig {
            sigma: 5.0,
            horizon: 10,
        }
    }
}

impl TargetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("targets: sigma {} must be > 0", self.sigma)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameTargets {
    /// Index of the hot entry of the one-hot class vector.
    pub label: usize,
    pub c_start: f64,
    pub c_end: f64,
}

impl FrameTargets {
    pub fn one_hot(&self, num_outputs: usize) -> Vec<f64> {
        let mut z = vec![0.0; num_outputs];
        z[self.label] = 1.0;
        z
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Start,
    End,
}

impl Boundary {
    /// Anchor frame of an action: its first frame, or its last in-action frame.
    pub fn anchor(self, a: &ActionAnnotation) -> usize {
        match self {
            Boundary::Start => a.start,
            Boundary::End => a.end - 1,
        }
    }
}

#[inline]
pub fn gaussian_confidence(t: f64, anchor: f64, sigma: f64) -> f64 {
    let d = t - anchor;
    (-(d * d) / (2.0 * sigma * sigma)).exp()
}

pub fn class_labels(seq: &SkeletonSequence, horizon: usize) -> Vec<usize> {
    class_labels_for(seq.len(), &seq.annotations, horizon)
}

/// Frame `t` takes class `g` when `t` lies in `[start - horizon, end)` of an
/// action of class `g`. Action bodies are labelled first; a pre-start window
/// only claims frames still blank, so it never relabels an earlier action.
pub fn class_labels_for(n: usize, annotations: &[ActionAnnotation], horizon: usize) -> Vec<usize> {
    let mut labels = vec![BLANK_CLASS; n];
    for a in annotations {
        for l in &mut labels[a.start..a.end.min(n)] {
            *l = a.class_id;
        }
    }
    for a in annotations {
        let lo = a.start.saturating_sub(horizon);
        for l in &mut labels[lo..a.start.min(n)] {
            if *l == BLANK_CLASS {
                *l = a.class_id;
            }
        }
    }
    labels
}

pub fn confidence_curve(seq: &SkeletonSequence, kind: Boundary, sigma: f64) -> Result<Vec<f64>> {
    confidence_curve_for(seq.len(), &seq.annotations, kind, sigma)
}

/// Gaussian around the nearest anchor (ties go to the earlier action).
/// All zeros when there are no actions.
pub fn confidence_curve_for(
    n: usize,
    annotations: &[ActionAnnotation],
    kind: Boundary,
    sigma: f64,
) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma {sigma} must be > 0")));
    }
    let anchors: Vec<usize> = annotations.iter().map(|a| kind.anchor(a)).collect();
    if anchors.is_empty() {
        return Ok(vec![0.0; n]);
    }
    let mut next = 0;
    Ok((0..n)
        .map(|t| {
            while next < anchors.len() && anchors[next] < t {
                next += 1;
            }
            let anchor = match (next.checked_sub(1).map(|i| anchors[i]), anchors.get(next)) {
                (Some(prev), Some(&after)) => {
                    if t - prev <= after - t {
                        prev
                    } else {
                        after
                    }
                }
                (Some(prev), None) => prev,
                (None, Some(&after)) => after,
                (None, None) => unreachable!(),
            };
            gaussian_confidence(t as f64, anchor as f64, sigma)
        })
        .collect())
}

pub fn build(seq: &SkeletonSequence, cfg: &TargetConfig) -> Result<Vec<FrameTargets>> {
    build_for(seq.len(), &seq.annotations, cfg)
}

pub fn build_for(n: usize, annotations: &[ActionAnnotation], cfg: &TargetConfig) -> Result<Vec<FrameTargets>> {
    cfg.validate()?;
    let labels = class_labels_for(n, annotations, cfg.horizon);
    let starts = confidence_curve_for(n, annotations, Boundary::Start, cfg.sigma)?;
    let ends = confidence_curve_for(n, annotations, Boundary::End, cfg.sigma)?;
    Ok(labels
        .into_iter()
        .zip(starts)
        .zip(ends)
        .map(|((label, c_start), c_end)| FrameTargets {
            label,
            c_start,
            c_end,
        })
        .collect())
}

/// `t,label,c_start,c_end` rows for debugging.
pub fn to_csv(targets: &[FrameTargets]) -> String {
    let mut out = String::from("t,label,c_start,c_end\n");
    for (t, ft) in targets.iter().enumerate() {
        out.push_str(&format!("{t},{},{},{}\n", ft.label, ft.c_start, ft.c_end));
    }
    out
}
