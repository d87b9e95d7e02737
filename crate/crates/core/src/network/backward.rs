//! Backpropagation through time for the joint loss
//!
//! `L = (1/N) Σ_t [ -ln max(y_t[z_t], 1e-12) + λ ((p^s_t - c^s_t)² + (p^e_t - c^e_t)²) ]`.
//!
//! The sequence start state is treated as a constant (no gradient flows into
//! a carried-over state).

use super::forward::{ForwardCache, FrameCache};
use super::{Model, Params};
use crate::error::{Error, Result};
use crate::targets::FrameTargets;
use crate::training::CE_FLOOR;

/// `dL/dp` for one frame's `(p_start, p_end)`.
#[inline]
pub fn head_output_grads(p: [f64; 2], c: [f64; 2], lambda: f64, inv_n: f64) -> [f64; 2] {
    [
        2.0 * lambda * inv_n * (p[0] - c[0]),
        2.0 * lambda * inv_n * (p[1] - c[1]),
    ]
}

/// Gradient of the joint loss with respect to every parameter.
pub fn backward_sequence(
    model: &Model,
    cache: &ForwardCache,
    targets: &[FrameTargets],
    lambda: f64,
) -> Result<Params> {
    if cache.len() != targets.len() {
        return Err(Error::Shape {
            op: "backward_sequence",
            left: (cache.len(), 1),
            right: (targets.len(), 1),
        });
    }
    let mut grads = Params::zeros(&model.config);
    let n = cache.len();
    if n == 0 {
        return Ok(grads);
    }
    let inv_n = 1.0 / n as f64;

    // Heads and shared FC stack have no recurrence: handle each frame on its own
    // and collect the gradient arriving at the top LSTM layer.
    let mut d_top: Vec<Vec<f64>> = cache
        .steps
        .iter()
        .zip(targets)
        .map(|(step, tgt)| frame_head_backward(model, step, tgt, lambda, inv_n, &mut grads))
        .collect();

    for l in (0..model.params.lstm.len()).rev() {
        d_top = lstm_layer_backward(model, cache, l, &d_top, &mut grads);
    }
    Ok(grads)
}

fn frame_head_backward(
    model: &Model,
    step: &FrameCache,
    tgt: &FrameTargets,
    lambda: f64,
    inv_n: f64,
    grads: &mut Params,
) -> Vec<f64> {
    let cfg = &model.config;
    let p = &model.params;
    let features = step.features();
    let classes = cfg.num_outputs();

    // Regression branch.
    let dp = head_output_grads(step.p, [tgt.c_start, tgt.c_end], lambda, inv_n);
    let dq = [
        dp[0] * cfg.regression_output.derivative_from_output(step.p[0]),
        dp[1] * cfg.regression_output.derivative_from_output(step.p[1]),
    ];
    grads.fc3.w.add_outer(&dq, &step.selected);
    for (b, d) in grads.fc3.b.data_mut().iter_mut().zip(dq) {
        *b += d;
    }
    let mut d_selected = vec![0.0; step.selected.len()];
    p.fc3.w.matvec_t_add(&dq, &mut d_selected);

    let mut dy_reg = vec![0.0; classes];
    let d_fc2: Vec<f64> = if cfg.use_soft_selector {
        let mut d = vec![0.0; d_selected.len()];
        for (row, (ds_row, fc2_row)) in d_selected
            .chunks_exact(classes)
            .zip(step.fc2.chunks_exact(classes))
            .enumerate()
        {
            for k in 0..classes {
                d[row * classes + k] = ds_row[k] * step.y[k];
                dy_reg[k] += ds_row[k] * fc2_row[k];
            }
        }
        d
    } else {
        d_selected
    };
    let dz2: Vec<f64> = d_fc2
        .iter()
        .zip(&step.fc2)
        .map(|(d, r)| d * (1.0 - r * r))
        .collect();
    grads.fc2.w.add_outer(&dz2, features);
    for (b, d) in grads.fc2.b.data_mut().iter_mut().zip(&dz2) {
        *b += d;
    }
    let mut d_features = vec![0.0; features.len()];
    p.fc2.w.matvec_t_add(&dz2, &mut d_features);

    // Classification branch: softmax + cross-entropy, plus whatever the
    // selector sent back into y.
    let y = &step.y;
    let mut dlogits = vec![0.0; classes];
    if y[tgt.label] > CE_FLOOR {
        for k in 0..classes {
            dlogits[k] = inv_n * y[k];
        }
        dlogits[tgt.label] -= inv_n;
    }
    let y_dot: f64 = y.iter().zip(&dy_reg).map(|(a, b)| a * b).sum();
    for k in 0..classes {
        dlogits[k] += y[k] * (dy_reg[k] - y_dot);
    }
    grads.fc1.w.add_outer(&dlogits, features);
    for (b, d) in grads.fc1.b.data_mut().iter_mut().zip(&dlogits) {
        *b += d;
    }
    p.fc1.w.matvec_t_add(&dlogits, &mut d_features);

    // Shared FC stack, top to bottom.
    let mut d_out = d_features;
    for (layer, (gl, sc)) in p
        .shared
        .iter()
        .zip(grads.shared.iter_mut().zip(&step.shared))
        .rev()
    {
        let dz: Vec<f64> = match &sc.mask {
            Some(mask) => d_out
                .iter()
                .zip(mask)
                .zip(&sc.act)
                .map(|((d, m), a)| d * m * (1.0 - a * a))
                .collect(),
            None => d_out
                .iter()
                .zip(&sc.act)
                .map(|(d, a)| d * (1.0 - a * a))
                .collect(),
        };
        gl.w.add_outer(&dz, &sc.input);
        for (b, d) in gl.b.data_mut().iter_mut().zip(&dz) {
            *b += d;
        }
        let mut d_in = vec![0.0; sc.input.len()];
        layer.w.matvec_t_add(&dz, &mut d_in);
        d_out = d_in;
    }
    d_out
}

/// BPTT through one LSTM layer. `d_out[t]` is the loss gradient on the
/// layer's output `h_t` from above; returns the gradient on its inputs.
fn lstm_layer_backward(
    model: &Model,
    cache: &ForwardCache,
    l: usize,
    d_out: &[Vec<f64>],
    grads: &mut Params,
) -> Vec<Vec<f64>> {
    let layer = &model.params.lstm[l];
    let g = &mut grads.lstm[l];
    let hid = layer.hidden();
    let mut dh_next = vec![0.0; hid];
    let mut dc_next = vec![0.0; hid];
    let mut d_in = vec![Vec::new(); cache.len()];
    let mut dz = vec![0.0; 4 * hid];

    for t in (0..cache.len()).rev() {
        let sc = &cache.steps[t].lstm[l];
        let (i, rest) = sc.gates.split_at(hid);
        let (f, rest) = rest.split_at(hid);
        let (o, gg) = rest.split_at(hid);
        for k in 0..hid {
            let dh = d_out[t][k] + dh_next[k];
            let dc = dc_next[k] + dh * o[k] * (1.0 - sc.tanh_c[k] * sc.tanh_c[k]);
            dz[k] = dc * gg[k] * i[k] * (1.0 - i[k]);
            dz[hid + k] = dc * sc.c_prev[k] * f[k] * (1.0 - f[k]);
            dz[2 * hid + k] = dh * sc.tanh_c[k] * o[k] * (1.0 - o[k]);
            dz[3 * hid + k] = dc * i[k] * (1.0 - gg[k] * gg[k]);
            dc_next[k] = dc * f[k];
        }
        g.wx.add_outer(&dz, &sc.x);
        g.wh.add_outer(&dz, &sc.h_prev);
        for (b, d) in g.b.data_mut().iter_mut().zip(&dz) {
            *b += d;
        }
        let mut dx = vec![0.0; sc.x.len()];
        layer.wx.matvec_t_add(&dz, &mut dx);
        d_in[t] = dx;
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        layer.wh.matvec_t_add(&dz, &mut dh_next);
    }
    d_in
}
