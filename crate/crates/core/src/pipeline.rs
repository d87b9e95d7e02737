//! Run configuration and the end-to-end steps shared by the CLI and the
//! acceptance tests: generate, train both stages, detect, evaluate.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{normalize, SkeletonSequence, SynthConfig};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalConfig, EvalReport, SequenceEval};
use crate::inference::{run_sequence, DetectorConfig, SequenceRun, StreamModel};
use crate::network::{FrameOutput, Model, ModelConfig};
use crate::numerics::Rng;
use crate::parallel::{map_indexed, Execution};
use crate::targets::{self, TargetConfig};
use crate::training::{train_stage, Stage, TrainConfig, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds model initialization and the train/test split.
    pub seed: u64,
    pub synth: SynthConfig,
    pub train_fraction: f64,
    pub targets: TargetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub detector: DetectorConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        RunConfig {
            seed: 1,
            train_fraction: 0.6,
            targets: TargetConfig::default(),
            model: ModelConfig {
                input_dim: synth.joints * 3,
                num_classes: synth.num_classes,
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
            detector: DetectorConfig::default(),
            eval: EvalConfig::default(),
            paths: Paths::default(),
            synth,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.targets.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.detector.validate()?;
        self.eval.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Checks that every sequence fits the model's input and class count.
pub fn check_compatible(model: &ModelConfig, seqs: &[SkeletonSequence]) -> Result<()> {
    for s in seqs {
        if s.feature_dim() != model.input_dim {
            return Err(Error::Data(format!(
                "{}: {} values per frame, model expects {}",
                s.name,
                s.feature_dim(),
                model.input_dim
            )));
        }
        if s.num_classes > model.num_classes {
            return Err(Error::Data(format!(
                "{}: {} classes, model has {}",
                s.name, s.num_classes, model.num_classes
            )));
        }
    }
    Ok(())
}

pub fn normalize_all(seqs: &[SkeletonSequence]) -> Vec<SkeletonSequence> {
    seqs.iter().map(normalize).collect()
}

/// Generated data split into `(train, test)`.
pub fn generate_split(cfg: &RunConfig, exec: Execution) -> Result<(Vec<SkeletonSequence>, Vec<SkeletonSequence>)> {
    let seqs = crate::dataset::generate_with(&cfg.synth, exec)?;
    crate::dataset::split(seqs, cfg.train_fraction, cfg.seed)
}

pub fn init_model(cfg: &RunConfig) -> Result<Model> {
    Model::init(&cfg.model, &mut Rng::derive(cfg.seed, 0x6d6f64656c))
}

pub struct Trained {
    /// Model after the classification stage alone.
    pub stage1: Model,
    /// Final model; equal to `stage1` when stage 2 was skipped.
    pub model: Model,
    pub log: TrainLog,
}

/// Called after each epoch with `(stage, epoch within stage, model)`.
pub type Checkpointer<'a> = dyn FnMut(Stage, usize, &Model) -> Result<()> + 'a;

/// Both training stages from a fresh initialization. Sequences are
/// normalized here.
pub fn train_from_scratch(
    cfg: &RunConfig,
    train: &[SkeletonSequence],
    stage1_only: bool,
    hook: &mut Checkpointer<'_>,
) -> Result<Trained> {
    cfg.validate()?;
    check_compatible(&cfg.model, train)?;
    let data = normalize_all(train);
    let mut model = init_model(cfg)?;
    let mut log = train_stage(
        &mut model,
        &data,
        &cfg.train,
        &cfg.targets,
        Stage::Classification,
        0,
        hook,
    )?;
    let stage1 = model.clone();
    if !stage1_only {
        let l2 = train_stage(
            &mut model,
            &data,
            &cfg.train,
            &cfg.targets,
            Stage::Joint,
            cfg.train.epochs_stage1,
            hook,
        )?;
        log.extend(l2);
    }
    Ok(Trained { stage1, model, log })
}

/// Runs a fresh detector over every (normalized) sequence.
pub fn detect_all<M: StreamModel + Sync>(
    model: &M,
    seqs: &[SkeletonSequence],
    cfg: &DetectorConfig,
    exec: Execution,
) -> Result<Vec<SequenceRun>> {
    map_indexed(seqs, exec, |_, s| run_sequence(model, &normalize(s).features(), cfg))
        .into_iter()
        .collect()
}

/// Perfect detections and outputs built from the annotations themselves.
pub fn oracle_runs(seqs: &[SkeletonSequence], num_outputs: usize, target_cfg: &TargetConfig) -> Result<Vec<SequenceRun>> {
    seqs.iter()
        .map(|s| {
            let tgts = targets::build(s, target_cfg)?;
            let outputs = tgts
                .iter()
                .map(|t| FrameOutput {
                    y: t.one_hot(num_outputs),
                    p_start: t.c_start,
                    p_end: t.c_end,
                })
                .collect();
            let detections = s
                .annotations
                .iter()
                .map(|a| crate::inference::ActionDetection {
                    class_id: a.class_id,
                    start: a.start,
                    end: a.end,
                })
                .collect();
            Ok(SequenceRun {
                outputs,
                events: Vec::new(),
                detections,
            })
        })
        .collect()
}

pub fn evaluate_runs(
    seqs: &[SkeletonSequence],
    runs: &[SequenceRun],
    num_outputs: usize,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if seqs.len() != runs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} sequences but {} detector runs",
            seqs.len(),
            runs.len()
        )));
    }
    let inputs: Vec<SequenceEval<'_>> = seqs
        .iter()
        .zip(runs)
        .map(|(s, r)| SequenceEval {
            annotations: &s.annotations,
            detections: &r.detections,
            events: &r.events,
            outputs: &r.outputs,
        })
        .collect();
    evaluate(&inputs, num_outputs, cfg)
}

/// Detection plus evaluation of `model` on `seqs`.
pub fn evaluate_model(
    model: &Model,
    seqs: &[SkeletonSequence],
    detector: &DetectorConfig,
    eval: &EvalConfig,
    exec: Execution,
) -> Result<(EvalReport, Vec<SequenceRun>)> {
    check_compatible(&model.config, seqs)?;
    let runs = detect_all(model, seqs, detector, exec)?;
    let report = evaluate_runs(seqs, &runs, model.config.num_outputs(), eval)?;
    Ok((report, runs))
}

/// Everything one synthetic experiment produces.
pub struct Experiment {
    pub trained: Trained,
    pub train: Vec<SkeletonSequence>,
    pub test: Vec<SkeletonSequence>,
    pub report: EvalReport,
    /// The stage-1 model scored with the same detector settings.
    pub stage1_report: EvalReport,
}

pub fn run_synthetic(cfg: &RunConfig, exec: Execution) -> Result<Experiment> {
    let (train, test) = generate_split(cfg, exec)?;
    let trained = train_from_scratch(cfg, &train, false, &mut |_, _, _| Ok(()))?;
    let (report, _) = evaluate_model(&trained.model, &test, &cfg.detector, &cfg.eval, exec)?;
    let (stage1_report, _) = evaluate_model(&trained.stage1, &test, &cfg.detector, &cfg.eval, exec)?;
    Ok(Experiment {
        trained,
        train,
        test,
        report,
        stage1_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model.input_dim, cfg.synth.joints * 3);
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"seed": 1, "epochs": 3}"#).unwrap_err().to_string();
        assert!(err.contains("epochs"), "{err}");
        let err = RunConfig::from_json(r#"{"train": {"learning_rate": 0.1}}"#).unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 9, "train": {"epochs_stage1": 2}}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.epochs_stage1, 2);
        assert_eq!(cfg.train.momentum, TrainConfig::default().momentum);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"train_fraction": 1.0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"detector": {"smoothing_window": 2}}"#).is_err());
    }

    fn small() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.synth = SynthConfig {
            num_classes: 2,
            joints: 4,
            num_sequences: 6,
            actions_per_sequence: 1,
            ..SynthConfig::default()
        };
        cfg.model = ModelConfig {
            input_dim: 12,
            layer_sizes: vec![6; 6],
            num_classes: 2,
            ..ModelConfig::default()
        };
        cfg.train.epochs_stage1 = 1;
        cfg.train.epochs_stage2 = 1;
        cfg.train.max_bptt_len = 40;
        cfg
    }

    #[test]
    fn oracle_runs_score_perfectly() {
        let cfg = small();
        let (_, test) = generate_split(&cfg, Execution::Sequential).unwrap();
        let runs = oracle_runs(&test, 3, &cfg.targets).unwrap();
        let r = evaluate_runs(&test, &runs, 3, &cfg.eval).unwrap();
        assert_eq!(r.average_f1, 1.0);
        assert_eq!((r.sl_score, r.el_score), (1.0, 1.0));
        assert_eq!(r.action_f1.f1, 1.0);
    }

    #[test]
    fn stage1_only_keeps_one_model() {
        let cfg = small();
        let (train, _) = generate_split(&cfg, Execution::Sequential).unwrap();
        let mut seen = Vec::new();
        let t = train_from_scratch(&cfg, &train, true, &mut |s, e, _| {
            seen.push((s, e));
            Ok(())
        })
        .unwrap();
        assert_eq!(t.model, t.stage1);
        assert_eq!(seen, vec![(Stage::Classification, 1)]);
        assert_eq!(t.log.entries.len(), 1);
    }

    #[test]
    fn mismatched_data_is_a_data_error() {
        let cfg = small();
        let (train, _) = generate_split(&cfg, Execution::Sequential).unwrap();
        let mut wide = cfg.clone();
        wide.model.input_dim = 15;
        assert!(matches!(
            train_from_scratch(&wide, &train, true, &mut |_, _, _| Ok(())),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn detection_is_the_same_in_both_modes() {
        let cfg = small();
        let exp = run_synthetic(&cfg, Execution::Parallel).unwrap();
        let (a, ra) = evaluate_model(&exp.trained.model, &exp.test, &cfg.detector, &cfg.eval, Execution::Sequential).unwrap();
        let (b, rb) = evaluate_model(&exp.trained.model, &exp.test, &cfg.detector, &cfg.eval, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(a, exp.report);
    }
}
