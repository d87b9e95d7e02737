//! Joint classification-regression network.
//!
//! ```text
//! frame ─ LSTM ─ LSTM ─ LSTM ─ FC ─ FC ─ FC ─┬─ FC1 ─ softmax ───────────── y
//!                                            └─ FC2 ─ soft selector(y) ─ FC3 ─ (p_start, p_end)
//! ```
//!
//! The three shared FC layers and FC2 use tanh, and the shared FC layers get
//! inverted dropout in training mode. The soft selector views the FC2
//! output as `fc2_multiplier` rows of `M + 1` columns and multiplies each row
//! elementwise by the class posterior `y`. Gradients are hand-derived and
//! flow through both selector inputs.
//!
//! LSTM gate blocks are stacked in the order input, forget, output,
//! candidate (`i, f, o, g`), each `hidden` rows tall. There are no peephole
//! connections.

mod backward;
mod checkpoint;
mod forward;
pub mod gradcheck;

pub use backward::{backward_sequence, head_output_grads};
pub use forward::{
    forward_sequence, forward_sequences, lstm_step, soft_selector, ForwardCache, FrameCache,
    FrameOutput, LstmStepCache, Mode, RecurrentState,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Activation, Matrix, Rng};

pub const NUM_LSTM_LAYERS: usize = 3;
pub const NUM_SHARED_FC_LAYERS: usize = 3;
pub const INIT_RANGE: f64 = 0.08;
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Three LSTM widths followed by three shared FC widths.
    pub layer_sizes: Vec<usize>,
    pub num_classes: usize,
    pub fc2_multiplier: usize,
    pub use_soft_selector: bool,
    /// Applied to the shared FC layers in training mode only.
    pub dropout_p: f64,
    pub regression_output: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 75,
            layer_sizes: vec![100, 100, 110, 110, 100, 100],
            num_classes: 10,
            fc2_multiplier: 10,
            use_soft_selector: true,
            dropout_p: 0.25,
            regression_output: Activation::Sigmoid,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.layer_sizes.len() != NUM_LSTM_LAYERS + NUM_SHARED_FC_LAYERS {
            return bad(format!(
                "layer_sizes needs {} entries, got {}",
                NUM_LSTM_LAYERS + NUM_SHARED_FC_LAYERS,
                self.layer_sizes.len()
            ));
        }
        if self.input_dim == 0 || self.layer_sizes.contains(&0) {
            return bad("all sizes must be >= 1".into());
        }
        if self.num_classes == 0 || self.fc2_multiplier == 0 {
            return bad("num_classes and fc2_multiplier must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if self.regression_output == Activation::Tanh {
            return bad("regression_output must be sigmoid or linear".into());
        }
        Ok(())
    }

    /// Width of the class posterior, `M + 1` including blank.
    pub fn num_outputs(&self) -> usize {
        self.num_classes + 1
    }

    pub fn lstm_sizes(&self) -> &[usize] {
        &self.layer_sizes[..NUM_LSTM_LAYERS]
    }

    pub fn shared_fc_sizes(&self) -> &[usize] {
        &self.layer_sizes[NUM_LSTM_LAYERS..]
    }

    pub fn feature_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    pub fn fc2_dim(&self) -> usize {
        self.fc2_multiplier * self.num_outputs()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// `4H x input`
    pub wx: Matrix,
    /// `4H x H`
    pub wh: Matrix,
    /// `4H x 1`
    pub b: Matrix,
}

impl LstmParams {
    pub fn hidden(&self) -> usize {
        self.wh.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.wx.cols()
    }

    fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            wx: Matrix::zeros(4 * hidden, input),
            wh: Matrix::zeros(4 * hidden, hidden),
            b: Matrix::zeros(4 * hidden, 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    pub w: Matrix,
    pub b: Matrix,
}

impl DenseParams {
    fn zeros(input: usize, output: usize) -> Self {
        DenseParams {
            w: Matrix::zeros(output, input),
            b: Matrix::zeros(output, 1),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.w.rows()
    }
}

/// Every trainable tensor. Also used for gradients and momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub lstm: Vec<LstmParams>,
    pub shared: Vec<DenseParams>,
    pub fc1: DenseParams,
    pub fc2: DenseParams,
    pub fc3: DenseParams,
}

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let mut input = cfg.input_dim;
        let mut lstm = Vec::with_capacity(NUM_LSTM_LAYERS);
        for &h in cfg.lstm_sizes() {
            lstm.push(LstmParams::zeros(input, h));
            input = h;
        }
        let mut shared = Vec::with_capacity(NUM_SHARED_FC_LAYERS);
        for &n in cfg.shared_fc_sizes() {
            shared.push(DenseParams::zeros(input, n));
            input = n;
        }
        Params {
            lstm,
            shared,
            fc1: DenseParams::zeros(input, cfg.num_outputs()),
            fc2: DenseParams::zeros(input, cfg.fc2_dim()),
            fc3: DenseParams::zeros(cfg.fc2_dim(), 2),
        }
    }

    /// `(name, tensor)` in a fixed order; names are checkpoint keys.
    pub fn blocks(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, l) in self.lstm.iter().enumerate() {
            out.push((format!("lstm{}/wx", i + 1), &l.wx));
            out.push((format!("lstm{}/wh", i + 1), &l.wh));
            out.push((format!("lstm{}/b", i + 1), &l.b));
        }
        for (i, d) in self.shared.iter().enumerate() {
            out.push((format!("shared{}/w", i + 1), &d.w));
            out.push((format!("shared{}/b", i + 1), &d.b));
        }
        for (name, d) in [("fc1", &self.fc1), ("fc2", &self.fc2), ("fc3", &self.fc3)] {
            out.push((format!("{name}/w"), &d.w));
            out.push((format!("{name}/b"), &d.b));
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (i, l) in self.lstm.iter_mut().enumerate() {
            out.push((format!("lstm{}/wx", i + 1), &mut l.wx));
            out.push((format!("lstm{}/wh", i + 1), &mut l.wh));
            out.push((format!("lstm{}/b", i + 1), &mut l.b));
        }
        for (i, d) in self.shared.iter_mut().enumerate() {
            out.push((format!("shared{}/w", i + 1), &mut d.w));
            out.push((format!("shared{}/b", i + 1), &mut d.b));
        }
        for (name, d) in [("fc1", &mut self.fc1), ("fc2", &mut self.fc2), ("fc3", &mut self.fc3)] {
            out.push((format!("{name}/w"), &mut d.w));
            out.push((format!("{name}/b"), &mut d.b));
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks().iter().map(|(_, m)| m.data().len()).sum()
    }

    pub fn global_norm(&self) -> f64 {
        self.blocks().iter().map(|(_, m)| m.sum_squares()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, m) in self.blocks_mut() {
            m.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, m)| m.is_finite())
    }

    /// Shape of every block matches `other`.
    pub fn same_shape(&self, other: &Params) -> bool {
        self.blocks()
            .iter()
            .zip(other.blocks())
            .all(|((_, a), (_, b))| a.shape() == b.shape())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

impl Model {
    /// Weights uniform in `[-0.08, 0.08)`, biases zero except the LSTM
    /// forget-gate bias, which starts at 1.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = Params::zeros(cfg);
        for (name, m) in params.blocks_mut() {
            if name.ends_with("/b") {
                continue;
            }
            for v in m.data_mut() {
                *v = rng.uniform(-INIT_RANGE, INIT_RANGE)?;
            }
        }
        for l in &mut params.lstm {
            let h = l.hidden();
            for v in &mut l.b.data_mut()[h..2 * h] {
                *v = FORGET_BIAS;
            }
        }
        Ok(Model {
            config: cfg.clone(),
            params,
        })
    }

    pub fn initial_state(&self) -> RecurrentState {
        RecurrentState::zeros(&self.config)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            layer_sizes: vec![3; 6],
            num_classes: 2,
            fc2_multiplier: 10,
            use_soft_selector: true,
            dropout_p: 0.0,
            regression_output: Activation::Sigmoid,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny_config();
        let a = Model::init(&cfg, &mut Rng::new(9)).unwrap();
        let b = Model::init(&cfg, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        let c = Model::init(&cfg, &mut Rng::new(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn forget_bias_is_one_and_other_biases_zero() {
        let m = Model::init(&tiny_config(), &mut Rng::new(1)).unwrap();
        for l in &m.params.lstm {
            let h = l.hidden();
            let b = l.b.data();
            assert!(b[..h].iter().all(|&v| v == 0.0));
            assert!(b[h..2 * h].iter().all(|&v| v == FORGET_BIAS));
            assert!(b[2 * h..].iter().all(|&v| v == 0.0));
        }
        for (name, m) in m.params.blocks() {
            if name.ends_with("/b") && !name.starts_with("lstm") {
                assert!(m.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn weights_within_init_range() {
        let cfg = ModelConfig {
            input_dim: 24,
            layer_sizes: vec![100, 100, 110, 110, 100, 100],
            num_classes: 3,
            ..ModelConfig::default()
        };
        let m = Model::init(&cfg, &mut Rng::new(2)).unwrap();
        let weights: Vec<f64> = m
            .params
            .blocks()
            .iter()
            .filter(|(n, _)| !n.ends_with("/b"))
            .flat_map(|(_, m)| m.data().to_vec())
            .collect();
        assert!(weights.len() > 100_000);
        assert!(weights.iter().all(|w| w.abs() <= INIT_RANGE));
        // Uses the whole range, not a sliver of it.
        assert!(weights.iter().fold(0.0f64, |a, w| a.max(w.abs())) > 0.079);
    }

    #[test]
    fn shapes_follow_config() {
        let cfg = ModelConfig {
            input_dim: 24,
            num_classes: 3,
            ..ModelConfig::default()
        };
        let p = Params::zeros(&cfg);
        assert_eq!(p.lstm[0].wx.shape(), (400, 24));
        assert_eq!(p.lstm[2].wh.shape(), (440, 110));
        assert_eq!(p.shared[0].w.shape(), (110, 110));
        assert_eq!(p.shared[2].w.shape(), (100, 100));
        assert_eq!(p.fc1.w.shape(), (4, 100));
        assert_eq!(p.fc2.w.shape(), (40, 100));
        assert_eq!(p.fc3.w.shape(), (2, 40));
        assert_eq!(p.blocks().len(), 3 * 3 + 2 * 3 + 2 * 3);
    }

    #[test]
    fn config_validation() {
        assert!(tiny_config().validate().is_ok());
        let mut c = tiny_config();
        c.layer_sizes.pop();
        assert!(c.validate().is_err());
        let c = ModelConfig { dropout_p: 1.0, ..tiny_config() };
        assert!(c.validate().is_err());
        let c = ModelConfig { regression_output: Activation::Tanh, ..tiny_config() };
        assert!(c.validate().is_err());
    }
}
