//! Skeleton streams, their action annotations, position normalization and
//! train/test splitting.
//!
//! Frame indices are `0..N`. Action intervals are half-open `[start, end)`
//! everywhere in the crate. Class `0` is the blank (no action) class, so
//! annotations use `1..=num_classes`.

mod io;
mod synth;

pub use io::{
    load_dir, load_frames, load_sequence, paths_for, save_dir, save_sequence, ANNOTATIONS_SUFFIX,
    FRAMES_SUFFIX,
};
pub use synth::{generate, generate_with, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const BLANK_CLASS: usize = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonFrame {
    pub t: usize,
    pub joints: Vec<[f64; 3]>,
}

impl SkeletonFrame {
    /// Row-major `[x0, y0, z0, x1, ...]`, the network input layout.
    pub fn features(&self) -> Vec<f64> {
        self.joints.iter().flatten().copied().collect()
    }
}

/// Half-open frame interval `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interval {
    pub start: usize,
    pub end: usize,
}

impl Interval {
    pub fn new(start: usize, end: usize) -> Self {
        Interval { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, t: usize) -> bool {
        self.start <= t && t < self.end
    }

    pub fn intersection_len(&self, other: &Interval) -> usize {
        self.end
            .min(other.end)
            .saturating_sub(self.start.max(other.start))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionAnnotation {
    pub class_id: usize,
    pub start: usize,
    pub end: usize,
}

impl ActionAnnotation {
    pub fn interval(&self) -> Interval {
        Interval::new(self.start, self.end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    pub name: String,
    pub frames: Vec<SkeletonFrame>,
    pub annotations: Vec<ActionAnnotation>,
    pub num_classes: usize,
    pub fps: f64,
}

impl SkeletonSequence {
    /// Builds a sequence and checks every invariant; violations are rejected.
    pub fn new(
        name: impl Into<String>,
        frames: Vec<SkeletonFrame>,
        annotations: Vec<ActionAnnotation>,
        num_classes: usize,
        fps: f64,
    ) -> Result<Self> {
        let seq = SkeletonSequence {
            name: name.into(),
            frames,
            annotations,
            num_classes,
            fps,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn num_joints(&self) -> usize {
        self.frames.first().map_or(0, |f| f.joints.len())
    }

    pub fn feature_dim(&self) -> usize {
        self.num_joints() * 3
    }

    pub fn features(&self) -> Vec<Vec<f64>> {
        self.frames.iter().map(SkeletonFrame::features).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Data(format!("{}: num_classes must be >= 1", self.name)));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Data(format!("{}: fps must be positive", self.name)));
        }
        let joints = self.num_joints();
        for (i, frame) in self.frames.iter().enumerate() {
            if frame.t != i {
                return Err(Error::Data(format!(
                    "{}: frame {} has index t={}, expected {}",
                    self.name, i, frame.t, i
                )));
            }
            if frame.joints.len() != joints || joints == 0 {
                return Err(Error::Data(format!(
                    "{}: frame {} has {} joints, expected {}",
                    self.name,
                    i,
                    frame.joints.len(),
                    joints
                )));
            }
            if frame.joints.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "{}: frame {} has a non-finite coordinate",
                    self.name, i
                )));
            }
        }
        let n = self.len();
        let mut prev_end = 0;
        for (i, a) in self.annotations.iter().enumerate() {
            if a.class_id == BLANK_CLASS || a.class_id > self.num_classes {
                return Err(Error::Data(format!(
                    "{}: action {} has class {} outside 1..={}",
                    self.name, i, a.class_id, self.num_classes
                )));
            }
            if a.start >= a.end || a.end > n {
                return Err(Error::Data(format!(
                    "{}: action {} interval [{}, {}) is empty or exceeds sequence length {}",
                    self.name, i, a.start, a.end, n
                )));
            }
            if i > 0 && a.start < prev_end {
                return Err(Error::Data(format!(
                    "{}: action {} starting at {} overlaps or precedes the previous action ending at {}",
                    self.name, i, a.start, prev_end
                )));
            }
            prev_end = a.end;
        }
        Ok(())
    }
}

/// Translates every frame so joint 0 sits at the origin.
pub fn normalize(seq: &SkeletonSequence) -> SkeletonSequence {
    let mut out = seq.clone();
    for frame in &mut out.frames {
        normalize_frame(frame);
    }
    out
}

pub fn normalize_frame(frame: &mut SkeletonFrame) {
    let Some(&root) = frame.joints.first() else {
        return;
    };
    for joint in &mut frame.joints {
        for (v, r) in joint.iter_mut().zip(root) {
            *v -= r;
        }
    }
}

/// Seeded shuffle split. Both halves keep the input order.
pub fn split<T>(items: Vec<T>, train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "split needs at least 2 sequences, got {}",
            items.len()
        )));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let n = items.len();
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let mut in_train = vec![false; n];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    let (mut train, mut test) = (Vec::with_capacity(n_train), Vec::with_capacity(n - n_train));
    for (item, flag) in items.into_iter().zip(in_train) {
        if flag {
            train.push(item);
        } else {
            test.push(item);
        }
    }
    Ok((train, test))
}
