use serde::{Deserialize, Serialize};

use super::{DenseParams, LstmParams, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{argmax, sigmoid, softmax_in_place, Rng};
use crate::parallel::{map_indexed, Execution};

/// Per-frame network output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameOutput {
    /// Class posterior over `0..=M`, blank first.
    pub y: Vec<f64>,
    pub p_start: f64,
    pub p_end: f64,
}

impl FrameOutput {
    pub fn argmax(&self) -> usize {
        argmax(&self.y)
    }
}

/// Hidden and cell state of every LSTM layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl RecurrentState {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        RecurrentState {
            h: cfg.lstm_sizes().iter().map(|&n| vec![0.0; n]).collect(),
            c: cfg.lstm_sizes().iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn reset(&mut self) {
        for v in self.h.iter_mut().chain(self.c.iter_mut()) {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

pub enum Mode<'a> {
    Infer,
    /// Dropout masks are drawn from the generator.
    Train(&'a mut Rng),
}

#[derive(Clone, Debug)]
pub struct LstmStepCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    /// Post-activation gates, `[i, f, o, g]`.
    pub gates: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct DenseStepCache {
    pub input: Vec<f64>,
    /// tanh output before dropout.
    pub act: Vec<f64>,
    /// Inverted-dropout multipliers (`0` or `1 / (1 - p)`), train mode only.
    pub mask: Option<Vec<f64>>,
    pub out: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FrameCache {
    pub lstm: Vec<LstmStepCache>,
    pub shared: Vec<DenseStepCache>,
    pub y: Vec<f64>,
    pub fc2: Vec<f64>,
    pub selected: Vec<f64>,
    pub p: [f64; 2],
}

impl FrameCache {
    /// Input to the three heads (last shared FC output).
    pub fn features(&self) -> &[f64] {
        &self.shared.last().expect("three shared layers").out
    }
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub steps: Vec<FrameCache>,
    pub final_state: RecurrentState,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

fn check_len(op: &'static str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape {
            op,
            left: (got, 1),
            right: (want, 1),
        });
    }
    Ok(())
}

/// One LSTM timestep.
pub fn lstm_step(
    layer: &LstmParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, LstmStepCache)> {
    let hid = layer.hidden();
    check_len("lstm_step input", x.len(), layer.input_dim())?;
    check_len("lstm_step h_prev", h_prev.len(), hid)?;
    check_len("lstm_step c_prev", c_prev.len(), hid)?;

    let mut z = layer.b.data().to_vec();
    layer.wx.matvec_add(x, &mut z);
    layer.wh.matvec_add(h_prev, &mut z);
    for v in &mut z[..3 * hid] {
        *v = sigmoid(*v);
    }
    for v in &mut z[3 * hid..] {
        *v = v.tanh();
    }
    let (i, rest) = z.split_at(hid);
    let (f, rest) = rest.split_at(hid);
    let (o, g) = rest.split_at(hid);

    let mut c = vec![0.0; hid];
    let mut tanh_c = vec![0.0; hid];
    let mut h = vec![0.0; hid];
    for k in 0..hid {
        c[k] = f[k] * c_prev[k] + i[k] * g[k];
        tanh_c[k] = c[k].tanh();
        h[k] = o[k] * tanh_c[k];
    }
    let cache = LstmStepCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        gates: z,
        c: c.clone(),
        tanh_c,
        h: h.clone(),
    };
    Ok((h, c, cache))
}

/// Multiplies each `probs.len()`-wide row of `fc2_out` elementwise by `probs`.
pub fn soft_selector(fc2_out: &[f64], probs: &[f64]) -> Result<Vec<f64>> {
    if probs.is_empty() || fc2_out.len() % probs.len() != 0 {
        return Err(Error::Shape {
            op: "soft_selector",
            left: (fc2_out.len(), 1),
            right: (probs.len(), 1),
        });
    }
    Ok(fc2_out
        .chunks_exact(probs.len())
        .flat_map(|row| row.iter().zip(probs).map(|(a, p)| a * p))
        .collect())
}

fn dense_tanh(layer: &DenseParams, input: &[f64]) -> Vec<f64> {
    let mut z = layer.b.data().to_vec();
    layer.w.matvec_add(input, &mut z);
    z.iter_mut().for_each(|v| *v = v.tanh());
    z
}

impl Model {
    /// Advances `state` by one frame in inference mode.
    pub fn step(&self, state: &mut RecurrentState, x: &[f64]) -> Result<FrameOutput> {
        self.frame_forward(x, state, None).map(|(out, _)| out)
    }

    pub(crate) fn frame_forward(
        &self,
        x: &[f64],
        state: &mut RecurrentState,
        mut dropout: Option<&mut Rng>,
    ) -> Result<(FrameOutput, FrameCache)> {
        let cfg = &self.config;
        check_len("frame input", x.len(), cfg.input_dim)?;

        let mut lstm = Vec::with_capacity(self.params.lstm.len());
        let mut input = x.to_vec();
        for (l, layer) in self.params.lstm.iter().enumerate() {
            let (h, c, cache) = lstm_step(layer, &input, &state.h[l], &state.c[l])?;
            state.h[l] = h.clone();
            state.c[l] = c;
            lstm.push(cache);
            input = h;
        }

        let p_drop = cfg.dropout_p;
        let mut shared = Vec::with_capacity(self.params.shared.len());
        for layer in &self.params.shared {
            let act = dense_tanh(layer, &input);
            let (mask, out) = match dropout.as_deref_mut() {
                Some(rng) if p_drop > 0.0 => {
                    let keep = 1.0 / (1.0 - p_drop);
                    let mask: Vec<f64> = (0..act.len())
                        .map(|_| if rng.bernoulli(p_drop).expect("validated p") { 0.0 } else { keep })
                        .collect();
                    let out = act.iter().zip(&mask).map(|(a, m)| a * m).collect();
                    (Some(mask), out)
                }
                _ => (None, act.clone()),
            };
            shared.push(DenseStepCache {
                input: std::mem::take(&mut input),
                act,
                mask,
                out: out.clone(),
            });
            input = out;
        }
        let features = input;

        let mut y = self.params.fc1.b.data().to_vec();
        self.params.fc1.w.matvec_add(&features, &mut y);
        softmax_in_place(&mut y);

        let fc2 = dense_tanh(&self.params.fc2, &features);
        let selected = if cfg.use_soft_selector {
            soft_selector(&fc2, &y)?
        } else {
            fc2.clone()
        };

        let mut q = self.params.fc3.b.data().to_vec();
        self.params.fc3.w.matvec_add(&selected, &mut q);
        let p = [
            cfg.regression_output.apply(q[0]),
            cfg.regression_output.apply(q[1]),
        ];

        let out = FrameOutput {
            y: y.clone(),
            p_start: p[0],
            p_end: p[1],
        };
        let cache = FrameCache {
            lstm,
            shared,
            y,
            fc2,
            selected,
            p,
        };
        Ok((out, cache))
    }
}

/// Runs the network causally over `frames`, starting from `initial` (zeros when `None`).
pub fn forward_sequence(
    model: &Model,
    frames: &[Vec<f64>],
    mode: Mode<'_>,
    initial: Option<&RecurrentState>,
) -> Result<(Vec<FrameOutput>, ForwardCache)> {
    let mut state = initial.cloned().unwrap_or_else(|| model.initial_state());
    let mut rng = match mode {
        Mode::Train(rng) => Some(rng),
        Mode::Infer => None,
    };
    let mut outputs = Vec::with_capacity(frames.len());
    let mut steps = Vec::with_capacity(frames.len());
    for x in frames {
        let (out, cache) = model.frame_forward(x, &mut state, rng.as_deref_mut())?;
        outputs.push(out);
        steps.push(cache);
    }
    Ok((
        outputs,
        ForwardCache {
            steps,
            final_state: state,
        },
    ))
}

/// Inference over many sequences; outputs are in input order.
pub fn forward_sequences(
    model: &Model,
    sequences: &[Vec<Vec<f64>>],
    exec: Execution,
) -> Result<Vec<Vec<FrameOutput>>> {
    map_indexed(sequences, exec, |_, frames| {
        let mut state = model.initial_state();
        frames.iter().map(|x| model.step(&mut state, x)).collect()
    })
    .into_iter()
    .collect()
}
