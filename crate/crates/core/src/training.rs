//! Losses, SGD with momentum, and the two training stages.
//!
//! Stage 1 trains the classification path only (`λ = 0`). Stage 2 starts
//! from the stage-1 model and minimizes the joint loss while `λ` ramps
//! linearly per epoch, reaching `lambda_max` on the last stage-2 epoch.
//!
//! Each sequence is one SGD example. Sequences longer than `max_bptt_len`
//! are cut into consecutive chunks; the recurrent state is carried across
//! chunks of the same sequence but gradients stop at chunk boundaries.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::SkeletonSequence;
use crate::error::{Error, Result};
use crate::network::{backward_sequence, forward_sequence, FrameOutput, Mode, Model, Params};
use crate::numerics::Rng;
use crate::targets::{self, FrameTargets, TargetConfig};

/// Probabilities are clamped here before taking the log.
pub const CE_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub lambda_max: f64,
    pub max_bptt_len: usize,
    /// Global L2 norm above which gradients are rescaled.
    pub grad_clip: f64,
    /// Write a checkpoint every this many epochs (0: only at stage ends).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.03,
            momentum: 0.9,
            epochs_stage1: 40,
            epochs_stage2: 40,
            lambda_max: 10.0,
            max_bptt_len: 200,
            grad_clip: 5.0,
            checkpoint_every: 0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.lambda_max >= 0.0) {
            return bad("lambda_max must be >= 0");
        }
        if self.max_bptt_len == 0 {
            return bad("max_bptt_len must be >= 1");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be > 0");
        }
        Ok(())
    }

    /// `λ` used during stage-2 epoch `epoch` (1-based).
    pub fn lambda_at(&self, epoch: usize) -> f64 {
        if self.epochs_stage2 == 0 {
            return self.lambda_max;
        }
        self.lambda_max * epoch as f64 / self.epochs_stage2 as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Classification,
    Joint,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Classification => "stage1",
            Stage::Joint => "stage2",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    /// Unweighted regression term.
    pub reg: f64,
}

fn check_lengths(outputs: &[FrameOutput], targets: &[FrameTargets]) -> Result<()> {
    if outputs.len() != targets.len() {
        return Err(Error::Shape {
            op: "loss",
            left: (outputs.len(), 1),
            right: (targets.len(), 1),
        });
    }
    Ok(())
}

/// Mean frame-wise cross-entropy.
pub fn loss_classification(outputs: &[FrameOutput], targets: &[FrameTargets]) -> Result<f64> {
    check_lengths(outputs, targets)?;
    if outputs.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = outputs
        .iter()
        .zip(targets)
        .map(|(o, t)| -o.y[t.label].max(CE_FLOOR).ln())
        .sum();
    Ok(sum / outputs.len() as f64)
}

/// `ce + λ · mean((p_s - c_s)² + (p_e - c_e)²)`.
pub fn loss_joint(outputs: &[FrameOutput], targets: &[FrameTargets], lambda: f64) -> Result<LossParts> {
    let ce = loss_classification(outputs, targets)?;
    if outputs.is_empty() {
        return Ok(LossParts::default());
    }
    let reg = outputs
        .iter()
        .zip(targets)
        .map(|(o, t)| (o.p_start - t.c_start).powi(2) + (o.p_end - t.c_end).powi(2))
        .sum::<f64>()
        / outputs.len() as f64;
    Ok(LossParts {
        total: ce + lambda * reg,
        ce,
        reg,
    })
}

/// Momentum buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Params,
}

impl OptimizerState {
    pub fn new(model: &Model) -> Self {
        OptimizerState {
            velocity: Params::zeros(&model.config),
        }
    }
}

/// Clips `grads` to `grad_clip` global norm, then `v ← μv − lr·g; θ ← θ + v`.
/// Returns the gradient norm before clipping.
pub fn sgd_step(
    model: &mut Model,
    grads: &mut Params,
    opt: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    grad_clip: f64,
) -> Result<f64> {
    if !grads.same_shape(&model.params) || !opt.velocity.same_shape(&model.params) {
        return Err(Error::InvalidArgument(
            "sgd_step: gradient or velocity shapes differ from the model".into(),
        ));
    }
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    if norm > grad_clip {
        grads.scale(grad_clip / norm);
    }
    for (((_, theta), (_, v)), (_, g)) in model
        .params
        .blocks_mut()
        .into_iter()
        .zip(opt.velocity.blocks_mut())
        .zip(grads.blocks())
    {
        for ((t, v), g) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *v = momentum * *v - lr * g;
            *t += *v;
        }
    }
    Ok(norm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    /// Running count across both stages, 1-based.
    pub epoch: usize,
    pub ce_loss: f64,
    pub reg_loss: f64,
    pub lambda: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,ce_loss,reg_loss,lambda,seconds\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.ce_loss, e.reg_loss, e.lambda, e.seconds
            ));
        }
        out
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.entries.extend(other.entries);
    }
}

struct Prepared {
    frames: Vec<Vec<f64>>,
    targets: Vec<FrameTargets>,
}

fn prepare(seqs: &[SkeletonSequence], target_cfg: &TargetConfig) -> Result<Vec<Prepared>> {
    seqs.iter()
        .map(|s| {
            Ok(Prepared {
                frames: s.features(),
                targets: targets::build(s, target_cfg)?,
            })
        })
        .collect()
}

/// Called after every epoch with `(stage, epoch within stage, model)`.
pub type EpochHook<'a> = dyn FnMut(Stage, usize, &Model) -> Result<()> + 'a;

pub fn train_stage1(
    model: &mut Model,
    seqs: &[SkeletonSequence],
    cfg: &TrainConfig,
    target_cfg: &TargetConfig,
) -> Result<TrainLog> {
    train_stage(model, seqs, cfg, target_cfg, Stage::Classification, 0, &mut |_, _, _| Ok(()))
}

pub fn train_stage2(
    model: &mut Model,
    seqs: &[SkeletonSequence],
    cfg: &TrainConfig,
    target_cfg: &TargetConfig,
) -> Result<TrainLog> {
    train_stage(model, seqs, cfg, target_cfg, Stage::Joint, 0, &mut |_, _, _| Ok(()))
}

/// Runs one stage. `epoch_offset` only shifts the epoch numbers in the log.
pub fn train_stage(
    model: &mut Model,
    seqs: &[SkeletonSequence],
    cfg: &TrainConfig,
    target_cfg: &TargetConfig,
    stage: Stage,
    epoch_offset: usize,
    hook: &mut EpochHook<'_>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if seqs.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if let Some(s) = seqs.iter().find(|s| s.feature_dim() != model.config.input_dim) {
        return Err(Error::Data(format!(
            "{}: frame width {} does not match model input {}",
            s.name,
            s.feature_dim(),
            model.config.input_dim
        )));
    }
    let data = prepare(seqs, target_cfg)?;
    let epochs = match stage {
        Stage::Classification => cfg.epochs_stage1,
        Stage::Joint => cfg.epochs_stage2,
    };
    let mut rng = Rng::derive(cfg.seed, stage as u64 + 1);
    let mut opt = OptimizerState::new(model);
    let mut log = TrainLog::default();

    for epoch in 1..=epochs {
        let started = Instant::now();
        let lambda = match stage {
            Stage::Classification => 0.0,
            Stage::Joint => cfg.lambda_at(epoch),
        };
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut order);

        let (mut ce_sum, mut reg_sum, mut frames) = (0.0, 0.0, 0usize);
        for &i in &order {
            let seq = &data[i];
            let mut state = model.initial_state();
            for (chunk, tgts) in seq
                .frames
                .chunks(cfg.max_bptt_len)
                .zip(seq.targets.chunks(cfg.max_bptt_len))
            {
                let (outs, cache) = forward_sequence(model, chunk, Mode::Train(&mut rng), Some(&state))?;
                let loss = loss_joint(&outs, tgts, lambda)?;
                if !loss.total.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "{} loss at epoch {epoch}",
                        stage.tag()
                    )));
                }
                ce_sum += loss.ce * chunk.len() as f64;
                reg_sum += loss.reg * chunk.len() as f64;
                frames += chunk.len();
                let mut grads = backward_sequence(model, &cache, tgts, lambda)?;
                sgd_step(model, &mut grads, &mut opt, cfg.lr, cfg.momentum, cfg.grad_clip)?;
                state = cache.final_state;
            }
        }
        if !model.params.is_finite() {
            return Err(Error::NonFinite(format!("parameters after {} epoch {epoch}", stage.tag())));
        }
        log.entries.push(EpochLog {
            stage,
            epoch: epoch_offset + epoch,
            ce_loss: ce_sum / frames.max(1) as f64,
            reg_loss: reg_sum / frames.max(1) as f64,
            lambda,
            seconds: started.elapsed().as_secs_f64(),
        });
        hook(stage, epoch, model)?;
    }
    Ok(log)
}

/// Frame-averaged losses of `model` in inference mode over `seqs`.
pub fn evaluate_loss(
    model: &Model,
    seqs: &[SkeletonSequence],
    target_cfg: &TargetConfig,
    lambda: f64,
) -> Result<LossParts> {
    let (mut ce, mut reg, mut n) = (0.0, 0.0, 0usize);
    for s in seqs {
        let (outs, _) = forward_sequence(model, &s.features(), Mode::Infer, None)?;
        let t = targets::build(s, target_cfg)?;
        let l = loss_joint(&outs, &t, lambda)?;
        ce += l.ce * s.len() as f64;
        reg += l.reg * s.len() as f64;
        n += s.len();
    }
    let (ce, reg) = (ce / n.max(1) as f64, reg / n.max(1) as f64);
    Ok(LossParts {
        total: ce + lambda * reg,
        ce,
        reg,
    })
}
