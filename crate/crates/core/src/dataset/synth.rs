//! Parametric skeleton-stream generator.
//!
//! Each sequence is `gap, action, gap, action, ..., gap`. Idle frames hold a
//! fixed rest pose plus noise. Action class `k` drives a class-specific
//! subset of joints along a class-specific axis with a class-specific
//! period, plus a static pose shift. The motion is a deterministic function
//! of (class, frame offset from the start, action length), so two noiseless
//! instances of a class with equal length are identical.
//!
//! The last `lead_in` idle frames before each action carry a weak, ramping
//! version of the upcoming motion (the body winds up before the annotated
//! start). The final quarter of each action winds down to half amplitude.
//! Without these cues the start and end of an action would be unpredictable
//! from the past alone and forecasting would have nothing to learn.

use serde::{Deserialize, Serialize};

use super::{ActionAnnotation, SkeletonFrame, SkeletonSequence};
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::parallel::{map_range, Execution};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub joints: usize,
    pub num_sequences: usize,
    pub actions_per_sequence: usize,
    pub action_len_mean: usize,
    pub action_len_jitter: usize,
    pub gap_len_mean: usize,
    pub gap_len_jitter: usize,
    pub lead_in: usize,
    pub noise_std: f64,
    /// Per-sequence random translation of the whole skeleton.
    pub root_offset_std: f64,
    pub fps: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 3,
            joints: 8,
            num_sequences: 50,
            actions_per_sequence: 2,
            action_len_mean: 36,
            action_len_jitter: 8,
            gap_len_mean: 27,
            gap_len_jitter: 5,
            lead_in: 10,
            noise_std: 0.02,
            root_offset_std: 0.5,
            fps: 30.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1");
        }
        if self.joints < 2 {
            return bad("joints must be >= 2 (joint 0 is the fixed root)");
        }
        if self.num_sequences == 0 || self.actions_per_sequence == 0 {
            return bad("num_sequences and actions_per_sequence must be >= 1");
        }
        if self.action_len_mean <= self.action_len_jitter {
            return bad("action_len_mean must exceed action_len_jitter");
        }
        if self.gap_len_mean <= self.gap_len_jitter + self.lead_in {
            return bad("gap_len_mean must exceed gap_len_jitter + lead_in");
        }
        if !(self.noise_std >= 0.0 && self.root_offset_std >= 0.0) {
            return bad("noise_std and root_offset_std must be >= 0");
        }
        if !(self.fps > 0.0) {
            return bad("fps must be positive");
        }
        Ok(())
    }

    /// Expected fraction of frames inside actions.
    pub fn expected_action_fraction(&self) -> f64 {
        let a = self.actions_per_sequence as f64;
        let action = a * self.action_len_mean as f64;
        action / (action + (a + 1.0) * self.gap_len_mean as f64)
    }
}

const LIMB_RADIUS: f64 = 0.4;
const SWING: f64 = 1.0;
const PASSIVE_SWING: f64 = 0.15;
const POSE_SHIFT: f64 = 0.6;
const LEAD_IN_GAIN: f64 = 0.35;

fn rest_pose(joints: usize) -> Vec<[f64; 3]> {
    let limbs = (joints - 1) as f64;
    let mut pose = vec![[0.0; 3]];
    for j in 1..joints {
        let angle = 2.0 * std::f64::consts::PI * (j - 1) as f64 / limbs;
        pose.push([
            LIMB_RADIUS * angle.cos(),
            LIMB_RADIUS * angle.sin(),
            0.1 * j as f64 / joints as f64,
        ]);
    }
    pose
}

/// Motion envelope at `offset` frames from the start (negative inside the lead-in).
fn envelope(offset: i64, len: usize, lead_in: usize) -> f64 {
    if offset < 0 {
        let into = (lead_in as i64 + offset + 1) as f64;
        return LEAD_IN_GAIN * into / (lead_in as f64 + 1.0);
    }
    let wind = (len / 4).max(1) as i64;
    let wind_start = len as i64 - wind;
    if offset >= wind_start {
        1.0 - 0.5 * (offset - wind_start + 1) as f64 / wind as f64
    } else {
        1.0
    }
}

/// Displacement of joint `j` for class `class` at frame `offset` of an action of length `len`.
fn template(class: usize, num_classes: usize, j: usize, offset: i64, len: usize, lead_in: usize) -> [f64; 3] {
    let k = class - 1;
    let active = (j - 1) % num_classes == k % num_classes;
    let axis = k % 3;
    let period = 16.0 + 4.0 * (k % 4) as f64 + 3.0 * (k / 4) as f64;
    let phase = 0.7 * j as f64 + 1.3 * k as f64;
    let env = envelope(offset, len, lead_in);
    let swing = if active { SWING } else { PASSIVE_SWING };
    let mut d = [0.0; 3];
    d[axis] = env * swing * (2.0 * std::f64::consts::PI * offset as f64 / period + phase).sin();
    if active {
        d[(axis + 1) % 3] += env * POSE_SHIFT;
    }
    d
}

struct Layout {
    /// (class, start, len) per action.
    actions: Vec<(usize, usize, usize)>,
    total: usize,
}

fn layout(cfg: &SynthConfig, classes: &[usize], rng: &mut Rng) -> Layout {
    let jitter = |rng: &mut Rng, mean: usize, jit: usize| {
        (mean as i64 + rng.int_between(-(jit as i64), jit as i64)) as usize
    };
    let mut t = jitter(rng, cfg.gap_len_mean, cfg.gap_len_jitter);
    let mut actions = Vec::with_capacity(classes.len());
    for &class in classes {
        let len = jitter(rng, cfg.action_len_mean, cfg.action_len_jitter);
        actions.push((class, t, len));
        t += len + jitter(rng, cfg.gap_len_mean, cfg.gap_len_jitter);
    }
    Layout { actions, total: t }
}

/// Balanced class assignment: consecutive blocks of `num_classes` actions are
/// shuffled permutations of `1..=num_classes`, so counts differ by at most one.
fn assign_classes(cfg: &SynthConfig, rng: &mut Rng) -> Vec<usize> {
    let total = cfg.num_sequences * cfg.actions_per_sequence;
    let mut out = Vec::with_capacity(total);
    while out.len() < total {
        let mut block: Vec<usize> = (1..=cfg.num_classes).collect();
        rng.shuffle(&mut block);
        out.extend(block);
    }
    out.truncate(total);
    out
}

fn generate_one(cfg: &SynthConfig, index: usize, classes: &[usize]) -> SkeletonSequence {
    let mut rng = Rng::derive(cfg.seed, index as u64 + 1);
    let lay = layout(cfg, classes, &mut rng);
    let rest = rest_pose(cfg.joints);
    let root = [
        cfg.root_offset_std * rng.normal(),
        cfg.root_offset_std * rng.normal(),
        cfg.root_offset_std * rng.normal(),
    ];

    let mut frames = Vec::with_capacity(lay.total);
    for t in 0..lay.total {
        // The action whose lead-in or body covers t, if any.
        let active = lay.actions.iter().find(|&&(_, start, len)| {
            t + cfg.lead_in >= start && t < start + len
        });
        let mut joints = Vec::with_capacity(cfg.joints);
        joints.push(root);
        for (j, rest_j) in rest.iter().enumerate().skip(1) {
            let mut p = [root[0] + rest_j[0], root[1] + rest_j[1], root[2] + rest_j[2]];
            if let Some(&(class, start, len)) = active {
                let offset = t as i64 - start as i64;
                let d = template(class, cfg.num_classes, j, offset, len, cfg.lead_in);
                for a in 0..3 {
                    p[a] += d[a];
                }
            }
            if cfg.noise_std > 0.0 {
                for v in &mut p {
                    *v += cfg.noise_std * rng.normal();
                }
            }
            joints.push(p);
        }
        frames.push(SkeletonFrame { t, joints });
    }

    let annotations = lay
        .actions
        .iter()
        .map(|&(class_id, start, len)| ActionAnnotation {
            class_id,
            start,
            end: start + len,
        })
        .collect();
    SkeletonSequence::new(
        format!("seq_{index:04}"),
        frames,
        annotations,
        cfg.num_classes,
        cfg.fps,
    )
    .expect("generator produces valid sequences")
}

pub fn generate(cfg: &SynthConfig) -> Result<Vec<SkeletonSequence>> {
    generate_with(cfg, Execution::default())
}

pub fn generate_with(cfg: &SynthConfig, exec: Execution) -> Result<Vec<SkeletonSequence>> {
    cfg.validate()?;
    let classes = assign_classes(cfg, &mut Rng::derive(cfg.seed, 0));
    let per = cfg.actions_per_sequence;
    Ok(map_range(cfg.num_sequences, exec, |i| {
        generate_one(cfg, i, &classes[i * per..(i + 1) * per])
    }))
}
