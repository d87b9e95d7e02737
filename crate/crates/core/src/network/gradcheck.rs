//! Central finite-difference check of `backward_sequence`.
//!
//! Each perturbed loss re-runs the forward pass in training mode with a
//! generator re-seeded to the same value, so dropout masks stay fixed
//! between the analytic and numeric evaluations.

use super::{backward_sequence, forward_sequence, Model, Mode};
use crate::error::Result;
use crate::numerics::Rng;
use crate::parallel::{map_range, Execution};
use crate::targets::FrameTargets;
use crate::training::loss_joint;

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct BlockCheck {
    pub name: String,
    pub scalars: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().fold(0.0, |m, b| m.max(b.max_rel_error))
    }

    pub fn worst_block(&self) -> Option<&BlockCheck> {
        self.blocks
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn loss_at(model: &Model, frames: &[Vec<f64>], targets: &[FrameTargets], lambda: f64, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let (outs, _) = forward_sequence(model, frames, Mode::Train(&mut rng), None)?;
    Ok(loss_joint(&outs, targets, lambda)?.total)
}

pub fn check_gradients(
    model: &Model,
    frames: &[Vec<f64>],
    targets: &[FrameTargets],
    lambda: f64,
    dropout_seed: u64,
    eps: f64,
    exec: Execution,
) -> Result<GradCheckReport> {
    let mut rng = Rng::new(dropout_seed);
    let (_, cache) = forward_sequence(model, frames, Mode::Train(&mut rng), None)?;
    let analytic = backward_sequence(model, &cache, targets, lambda)?;

    let shapes: Vec<(String, usize)> = model
        .params
        .blocks()
        .iter()
        .map(|(n, m)| (n.clone(), m.data().len()))
        .collect();
    let index: Vec<(usize, usize)> = shapes
        .iter()
        .enumerate()
        .flat_map(|(b, (_, len))| (0..*len).map(move |i| (b, i)))
        .collect();

    let numeric: Vec<Result<f64>> = map_range(index.len(), exec, |k| {
        let (b, i) = index[k];
        let mut m = model.clone();
        let orig = m.params.blocks()[b].1.data()[i];
        m.params.blocks_mut()[b].1.data_mut()[i] = orig + eps;
        let plus = loss_at(&m, frames, targets, lambda, dropout_seed)?;
        m.params.blocks_mut()[b].1.data_mut()[i] = orig - eps;
        let minus = loss_at(&m, frames, targets, lambda, dropout_seed)?;
        Ok((plus - minus) / (2.0 * eps))
    });

    let analytic_blocks = analytic.blocks();
    let mut blocks: Vec<BlockCheck> = shapes
        .iter()
        .map(|(name, len)| BlockCheck {
            name: name.clone(),
            scalars: *len,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        })
        .collect();
    for (&(b, i), num) in index.iter().zip(numeric) {
        let num = num?;
        let a = analytic_blocks[b].1.data()[i];
        let entry = &mut blocks[b];
        entry.max_rel_error = entry.max_rel_error.max(relative_error(a, num));
        entry.max_abs_error = entry.max_abs_error.max((a - num).abs());
    }
    Ok(GradCheckReport { blocks })
}
