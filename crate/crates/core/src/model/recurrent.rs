//! Forward pass and backpropagation through time for the stacked recurrent
//! encoder with a linear readout of the final or mean top-layer state.

use std::ops::Range;

use super::{dot, CellKind, EncoderParams, Readout};
use crate::features::EncoderInput;

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out += W x` for row-major `W` (`out.len()` rows).
#[inline]
fn matvec_acc(out: &mut [f64], w: &[f64], x: &[f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += dot(row, x);
    }
}

/// `out += W^T dy`.
#[inline]
fn matvec_t_acc(out: &mut [f64], w: &[f64], dy: &[f64]) {
    let cols = out.len();
    for (&d, row) in dy.iter().zip(w.chunks_exact(cols)) {
        if d != 0.0 {
            for (o, &wv) in out.iter_mut().zip(row) {
                *o += d * wv;
            }
        }
    }
}

/// `dw += dy x^T`.
#[inline]
fn outer_acc(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let cols = x.len();
    for (&d, row) in dy.iter().zip(dw.chunks_exact_mut(cols)) {
        if d != 0.0 {
            for (g, &xv) in row.iter_mut().zip(x) {
                *g += d * xv;
            }
        }
    }
}

struct LayerSlots {
    input: usize,
    w_x: Range<usize>,
    // GRU: w_h, b_x, b_h. IndRNN: u, b, (unused)
    second: Range<usize>,
    third: Range<usize>,
    fourth: Range<usize>,
}

fn slots(params: &EncoderParams) -> (Vec<LayerSlots>, Range<usize>, Range<usize>) {
    let find = |name: &str| {
        params
            .layout()
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.range())
            .expect("tensor present in layout")
    };
    let c = params.config();
    let layers = (0..c.num_recurrent_layers)
        .map(|l| {
            let input = if l == 0 { c.input_width } else { c.hidden_size };
            match c.cell {
                CellKind::Gru => LayerSlots {
                    input,
                    w_x: find(&format!("rnn.{l}.w_x")),
                    second: find(&format!("rnn.{l}.w_h")),
                    third: find(&format!("rnn.{l}.b_x")),
                    fourth: find(&format!("rnn.{l}.b_h")),
                },
                CellKind::IndRnn => LayerSlots {
                    input,
                    w_x: find(&format!("rnn.{l}.w_x")),
                    second: find(&format!("rnn.{l}.u")),
                    third: find(&format!("rnn.{l}.b")),
                    fourth: 0..0,
                },
            }
        })
        .collect();
    (layers, find("readout.w"), find("readout.b"))
}

struct LayerTrace {
    // (T + 1) x H, row 0 is the zero initial state
    hs: Vec<f64>,
    // GRU gates z, r, n and the recurrent candidate term; IndRNN keeps its
    // pre-activation in `z`
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    hn: Vec<f64>,
}

/// Cached activations of one forward pass.
pub struct ForwardTrace {
    layers: Vec<LayerTrace>,
    rows: usize,
    pooled: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl ForwardTrace {
    /// Final hidden state of the top layer.
    pub fn final_state(&self) -> &[f64] {
        let top = self.layers.last().expect("at least one layer");
        let h = top.hs.len() / (self.rows + 1);
        &top.hs[self.rows * h..]
    }
}

fn layer_input<'a>(input: &'a EncoderInput, below: Option<&'a LayerTrace>, h: usize, t: usize) -> &'a [f64] {
    match below {
        None => input.row(t),
        Some(tr) => &tr.hs[(t + 1) * h..(t + 2) * h],
    }
}

pub(crate) fn forward(params: &EncoderParams, input: &EncoderInput) -> ForwardTrace {
    let config = params.config();
    let h = config.hidden_size;
    let rows = input.rows();
    let v = params.values();
    let (layer_slots, ro_w, ro_b) = slots(params);
    let mut layers: Vec<LayerTrace> = Vec::with_capacity(layer_slots.len());
    for slot in &layer_slots {
        let below = layers.last();
        let mut tr = LayerTrace {
            hs: vec![0.0; (rows + 1) * h],
            z: vec![0.0; rows * h],
            r: Vec::new(),
            n: Vec::new(),
            hn: Vec::new(),
        };
        match config.cell {
            CellKind::Gru => {
                tr.r = vec![0.0; rows * h];
                tr.n = vec![0.0; rows * h];
                tr.hn = vec![0.0; rows * h];
                let (w_x, w_h, b_x, b_h) = (&v[slot.w_x.clone()], &v[slot.second.clone()], &v[slot.third.clone()], &v[slot.fourth.clone()]);
                let mut ax = vec![0.0; 3 * h];
                let mut ah = vec![0.0; 3 * h];
                for t in 0..rows {
                    let x = layer_input(input, below, h, t);
                    let (prev_hs, next_hs) = tr.hs.split_at_mut((t + 1) * h);
                    let h_prev = &prev_hs[t * h..];
                    ax.copy_from_slice(b_x);
                    matvec_acc(&mut ax, w_x, x);
                    ah.copy_from_slice(b_h);
                    matvec_acc(&mut ah, w_h, h_prev);
                    let h_out = &mut next_hs[..h];
                    for k in 0..h {
                        let z = sigmoid(ax[k] + ah[k]);
                        let r = sigmoid(ax[h + k] + ah[h + k]);
                        let hn = ah[2 * h + k];
                        let n = (ax[2 * h + k] + r * hn).tanh();
                        h_out[k] = (1.0 - z) * n + z * h_prev[k];
                        tr.z[t * h + k] = z;
                        tr.r[t * h + k] = r;
                        tr.n[t * h + k] = n;
                        tr.hn[t * h + k] = hn;
                    }
                }
            }
            CellKind::IndRnn => {
                let (w_x, u, b) = (&v[slot.w_x.clone()], &v[slot.second.clone()], &v[slot.third.clone()]);
                let mut a = vec![0.0; h];
                for t in 0..rows {
                    let x = layer_input(input, below, h, t);
                    let (prev_hs, next_hs) = tr.hs.split_at_mut((t + 1) * h);
                    let h_prev = &prev_hs[t * h..];
                    a.copy_from_slice(b);
                    matvec_acc(&mut a, w_x, x);
                    for k in 0..h {
                        a[k] += u[k] * h_prev[k];
                        next_hs[k] = a[k].max(0.0);
                    }
                    tr.z[t * h..(t + 1) * h].copy_from_slice(&a);
                }
            }
        }
        layers.push(tr);
    }
    let top = layers.last().expect("at least one layer");
    let pooled = match config.readout {
        Readout::Final => top.hs[rows * h..].to_vec(),
        Readout::Mean => {
            let mut m = vec![0.0; h];
            for row in top.hs[h..].chunks_exact(h) {
                m.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            m.iter_mut().for_each(|a| *a /= rows as f64);
            m
        }
    };
    let mut embedding = v[ro_b].to_vec();
    matvec_acc(&mut embedding, &v[ro_w], &pooled);
    ForwardTrace {
        layers,
        rows,
        pooled,
        embedding,
    }
}

/// Accumulates into `grads` (same layout as the parameters) the gradient of a
/// loss whose derivative with respect to the embedding is `d_embedding`.
pub(crate) fn backward(params: &EncoderParams, input: &EncoderInput, trace: &ForwardTrace, d_embedding: &[f64], grads: &mut [f64]) {
    let config = params.config();
    let h = config.hidden_size;
    let rows = trace.rows;
    let v = params.values();
    let (layer_slots, ro_w, ro_b) = slots(params);

    outer_acc(&mut grads[ro_w.clone()], d_embedding, &trace.pooled);
    for (g, d) in grads[ro_b].iter_mut().zip(d_embedding) {
        *g += d;
    }
    // gradient w.r.t. each output row of the current layer
    let mut d_out = vec![0.0; rows * h];
    let mut d_pooled = vec![0.0; h];
    matvec_t_acc(&mut d_pooled, &v[ro_w], d_embedding);
    match config.readout {
        Readout::Final => d_out[(rows - 1) * h..].copy_from_slice(&d_pooled),
        Readout::Mean => {
            let share: Vec<f64> = d_pooled.iter().map(|d| d / rows as f64).collect();
            for row in d_out.chunks_exact_mut(h) {
                row.copy_from_slice(&share);
            }
        }
    }

    for (l, slot) in layer_slots.iter().enumerate().rev() {
        let tr = &trace.layers[l];
        let below = if l == 0 { None } else { Some(&trace.layers[l - 1]) };
        let need_input_grad = l > 0;
        let mut d_in = if need_input_grad { vec![0.0; rows * slot.input] } else { Vec::new() };
        let mut dh_next = vec![0.0; h];
        match config.cell {
            CellKind::Gru => {
                let mut dax = vec![0.0; 3 * h];
                let mut dah = vec![0.0; 3 * h];
                for t in (0..rows).rev() {
                    let x = layer_input(input, below, h, t);
                    let h_prev = &tr.hs[t * h..(t + 1) * h];
                    for k in 0..h {
                        let i = t * h + k;
                        let dh = d_out[i] + dh_next[k];
                        let (z, r, n, hn) = (tr.z[i], tr.r[i], tr.n[i], tr.hn[i]);
                        let dn = dh * (1.0 - z);
                        let dz = dh * (h_prev[k] - n);
                        dh_next[k] = dh * z;
                        let dan = dn * (1.0 - n * n);
                        let dr = dan * hn;
                        let daz = dz * z * (1.0 - z);
                        let dar = dr * r * (1.0 - r);
                        dax[k] = daz;
                        dax[h + k] = dar;
                        dax[2 * h + k] = dan;
                        dah[k] = daz;
                        dah[h + k] = dar;
                        dah[2 * h + k] = dan * r;
                    }
                    outer_acc(&mut grads[slot.w_x.clone()], &dax, x);
                    outer_acc(&mut grads[slot.second.clone()], &dah, h_prev);
                    for (g, d) in grads[slot.third.clone()].iter_mut().zip(&dax) {
                        *g += d;
                    }
                    for (g, d) in grads[slot.fourth.clone()].iter_mut().zip(&dah) {
                        *g += d;
                    }
                    matvec_t_acc(&mut dh_next, &v[slot.second.clone()], &dah);
                    if need_input_grad {
                        matvec_t_acc(&mut d_in[t * slot.input..(t + 1) * slot.input], &v[slot.w_x.clone()], &dax);
                    }
                }
            }
            CellKind::IndRnn => {
                let u = &v[slot.second.clone()];
                let mut da = vec![0.0; h];
                for t in (0..rows).rev() {
                    let x = layer_input(input, below, h, t);
                    let h_prev = &tr.hs[t * h..(t + 1) * h];
                    for k in 0..h {
                        let i = t * h + k;
                        let dh = d_out[i] + dh_next[k];
                        da[k] = if tr.z[i] > 0.0 { dh } else { 0.0 };
                        grads[slot.second.start + k] += da[k] * h_prev[k];
                        grads[slot.third.start + k] += da[k];
                        dh_next[k] = da[k] * u[k];
                    }
                    outer_acc(&mut grads[slot.w_x.clone()], &da, x);
                    if need_input_grad {
                        matvec_t_acc(&mut d_in[t * slot.input..(t + 1) * slot.input], &v[slot.w_x.clone()], &da);
                    }
                }
            }
        }
        if need_input_grad {
            d_out = d_in;
        }
    }
}
