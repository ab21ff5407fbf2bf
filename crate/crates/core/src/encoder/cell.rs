//! Forward and backward passes of the recurrent cells.

use super::{CellKind, CellUpdate, Layer, NetShape, Sequence};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out += M x` for a row-major `M` with `out.len()` rows.
fn matvec_add(out: &mut [f64], m: &[f64], x: &[f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += Mᵀ a`.
fn matvec_t_add(out: &mut [f64], m: &[f64], a: &[f64]) {
    let cols = out.len();
    for (&ar, row) in a.iter().zip(m.chunks_exact(cols)) {
        if ar != 0.0 {
            out.iter_mut().zip(row).for_each(|(o, w)| *o += ar * w);
        }
    }
}

/// `G += a xᵀ`.
fn outer_add(g: &mut [f64], a: &[f64], x: &[f64]) {
    let cols = x.len();
    for (&ar, row) in a.iter().zip(g.chunks_exact_mut(cols)) {
        if ar != 0.0 {
            row.iter_mut().zip(x).for_each(|(o, v)| *o += ar * v);
        }
    }
}

pub(crate) struct LayerTrace {
    steps: usize,
    hidden: usize,
    gates: usize,
    /// `(steps + 1) × hidden`; row 0 is the zero initial state.
    hs: Vec<f64>,
    /// LSTM memory, same layout as `hs`.
    cs: Vec<f64>,
    /// Post-activation gate values, `steps × (gates·hidden)`.
    acts: Vec<f64>,
    /// GRU `r ⊙ h_{t-1}`, `steps × hidden`.
    rh: Vec<f64>,
}

impl LayerTrace {
    fn h(&self, t: usize) -> &[f64] {
        &self.hs[t * self.hidden..(t + 1) * self.hidden]
    }

    fn c(&self, t: usize) -> &[f64] {
        &self.cs[t * self.hidden..(t + 1) * self.hidden]
    }

    fn act(&self, t: usize) -> &[f64] {
        let n = self.gates * self.hidden;
        &self.acts[t * n..(t + 1) * n]
    }

    /// Hidden states `h_1..h_T` as a flat row-major block.
    fn outputs(&self) -> &[f64] {
        &self.hs[self.hidden..]
    }
}

pub(crate) struct Trace {
    input: Vec<f64>,
    input_dim: usize,
    layers: Vec<LayerTrace>,
}

impl Trace {
    pub(crate) fn output(&self) -> &[f64] {
        let top = self.layers.last().expect("at least one layer");
        top.h(top.steps)
    }
}

pub(crate) fn forward(tower: &[Layer], shape: NetShape, seq: &Sequence) -> Trace {
    let mut layers: Vec<LayerTrace> = Vec::with_capacity(tower.len());
    for (l, layer) in tower.iter().enumerate() {
        let xs = if l == 0 { seq.data() } else { layers[l - 1].outputs() };
        let lt = forward_layer(layer, shape, xs);
        layers.push(lt);
    }
    Trace {
        input: seq.data().to_vec(),
        input_dim: seq.dim(),
        layers,
    }
}

fn forward_layer(layer: &Layer, shape: NetShape, xs: &[f64]) -> LayerTrace {
    let h = layer.hidden_dim;
    let din = layer.input_dim;
    let steps = xs.len() / din;
    let gates = shape.cell.gates();
    let mut tr = LayerTrace {
        steps,
        hidden: h,
        gates,
        hs: vec![0.0; (steps + 1) * h],
        cs: if shape.cell == CellKind::Lstm { vec![0.0; (steps + 1) * h] } else { Vec::new() },
        acts: vec![0.0; steps * gates * h],
        rh: if shape.cell == CellKind::Gru { vec![0.0; steps * h] } else { Vec::new() },
    };
    let mut a = vec![0.0; gates * h];
    for t in 0..steps {
        let x = &xs[t * din..(t + 1) * din];
        let (past, future) = tr.hs.split_at_mut((t + 1) * h);
        let hp = &past[t * h..];
        let hn = &mut future[..h];
        let act = &mut tr.acts[t * gates * h..(t + 1) * gates * h];
        a.copy_from_slice(&layer.b);
        match shape.cell {
            CellKind::Lstm => {
                matvec_add(&mut a, &layer.w, x);
                matvec_add(&mut a, &layer.u, hp);
                let (cpast, cfuture) = tr.cs.split_at_mut((t + 1) * h);
                let cp = &cpast[t * h..];
                let cn = &mut cfuture[..h];
                for k in 0..h {
                    let i = sigmoid(a[k]);
                    let f = sigmoid(a[h + k]);
                    let g = a[2 * h + k].tanh();
                    let o = sigmoid(a[3 * h + k]);
                    let keep = match shape.update {
                        CellUpdate::Standard => cp[k],
                        CellUpdate::CandidateOnly => g,
                    };
                    let c = i * g + f * keep;
                    cn[k] = c;
                    hn[k] = o * c.tanh();
                    act[k] = i;
                    act[h + k] = f;
                    act[2 * h + k] = g;
                    act[3 * h + k] = o;
                }
            }
            CellKind::Gru => {
                let (azr, an) = a.split_at_mut(2 * h);
                matvec_add(azr, &layer.w[..2 * h * din], x);
                matvec_add(azr, &layer.u[..2 * h * h], hp);
                let rh = &mut tr.rh[t * h..(t + 1) * h];
                for k in 0..h {
                    act[k] = sigmoid(azr[k]);
                    act[h + k] = sigmoid(azr[h + k]);
                    rh[k] = act[h + k] * hp[k];
                }
                matvec_add(an, &layer.w[2 * h * din..], x);
                matvec_add(an, &layer.u[2 * h * h..], rh);
                for k in 0..h {
                    let z = act[k];
                    let n = an[k].tanh();
                    act[2 * h + k] = n;
                    hn[k] = (1.0 - z) * hp[k] + z * n;
                }
            }
            CellKind::Rnn => {
                matvec_add(&mut a, &layer.w, x);
                matvec_add(&mut a, &layer.u, hp);
                for k in 0..h {
                    let v = a[k].tanh();
                    act[k] = v;
                    hn[k] = v;
                }
            }
        }
    }
    tr
}

/// Backpropagate `d_out`, the gradient of the loss with respect to the final
/// hidden state of the top layer, accumulating into `grads`.
pub(crate) fn backward(tower: &[Layer], shape: NetShape, trace: &Trace, d_out: &[f64], grads: &mut [Layer]) {
    let top = trace.layers.len() - 1;
    let steps = trace.layers[top].steps;
    let h = shape.hidden_dim;
    let mut dh_ext = vec![0.0; steps * h];
    dh_ext[(steps - 1) * h..].copy_from_slice(d_out);
    for l in (0..=top).rev() {
        let xs: &[f64] = if l == 0 { &trace.input } else { trace.layers[l - 1].outputs() };
        let din = if l == 0 { trace.input_dim } else { h };
        let need_dx = l > 0;
        dh_ext = backward_layer(&tower[l], shape, &trace.layers[l], xs, din, &dh_ext, &mut grads[l], need_dx);
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_layer(
    layer: &Layer,
    shape: NetShape,
    tr: &LayerTrace,
    xs: &[f64],
    din: usize,
    dh_ext: &[f64],
    g: &mut Layer,
    need_dx: bool,
) -> Vec<f64> {
    let h = layer.hidden_dim;
    let gates = tr.gates;
    let mut dx = if need_dx { vec![0.0; tr.steps * din] } else { Vec::new() };
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut da = vec![0.0; gates * h];
    let mut dh = vec![0.0; h];
    for t in (0..tr.steps).rev() {
        let x = &xs[t * din..(t + 1) * din];
        let hp = tr.h(t);
        let act = tr.act(t);
        for k in 0..h {
            dh[k] = dh_ext[t * h + k] + dh_next[k];
        }
        match shape.cell {
            CellKind::Lstm => {
                let c = tr.c(t + 1);
                let cp = tr.c(t);
                for k in 0..h {
                    let (i, f, gg, o) = (act[k], act[h + k], act[2 * h + k], act[3 * h + k]);
                    let tc = c[k].tanh();
                    let d_o = dh[k] * tc;
                    let dc = dc_next[k] + dh[k] * o * (1.0 - tc * tc);
                    let (di, df, dg, dcp) = match shape.update {
                        CellUpdate::Standard => (dc * gg, dc * cp[k], dc * i, dc * f),
                        CellUpdate::CandidateOnly => (dc * gg, dc * gg, dc * (i + f), 0.0),
                    };
                    da[k] = di * i * (1.0 - i);
                    da[h + k] = df * f * (1.0 - f);
                    da[2 * h + k] = dg * (1.0 - gg * gg);
                    da[3 * h + k] = d_o * o * (1.0 - o);
                    dc_next[k] = dcp;
                }
                outer_add(&mut g.w, &da, x);
                outer_add(&mut g.u, &da, hp);
                g.b.iter_mut().zip(&da).for_each(|(b, d)| *b += d);
                if need_dx {
                    matvec_t_add(&mut dx[t * din..(t + 1) * din], &layer.w, &da);
                }
                dh_next.fill(0.0);
                matvec_t_add(&mut dh_next, &layer.u, &da);
            }
            CellKind::Gru => {
                let rh = &tr.rh[t * h..(t + 1) * h];
                let mut dhp = vec![0.0; h];
                let (dzr, dn) = da.split_at_mut(2 * h);
                for k in 0..h {
                    let (z, n) = (act[k], act[2 * h + k]);
                    let dz = dh[k] * (n - hp[k]);
                    dn[k] = dh[k] * z * (1.0 - n * n);
                    dzr[k] = dz * z * (1.0 - z);
                    dhp[k] = dh[k] * (1.0 - z);
                }
                outer_add(&mut g.w[2 * h * din..], dn, x);
                outer_add(&mut g.u[2 * h * h..], dn, rh);
                let mut drh = vec![0.0; h];
                matvec_t_add(&mut drh, &layer.u[2 * h * h..], dn);
                for k in 0..h {
                    let r = act[h + k];
                    dzr[h + k] = drh[k] * hp[k] * r * (1.0 - r);
                    dhp[k] += drh[k] * r;
                }
                outer_add(&mut g.w[..2 * h * din], dzr, x);
                outer_add(&mut g.u[..2 * h * h], dzr, hp);
                g.b.iter_mut().zip(da.iter()).for_each(|(b, d)| *b += d);
                matvec_t_add(&mut dhp, &layer.u[..2 * h * h], &da[..2 * h]);
                if need_dx {
                    matvec_t_add(&mut dx[t * din..(t + 1) * din], &layer.w, &da);
                }
                dh_next = dhp;
            }
            CellKind::Rnn => {
                for k in 0..h {
                    da[k] = dh[k] * (1.0 - act[k] * act[k]);
                }
                outer_add(&mut g.w, &da, x);
                outer_add(&mut g.u, &da, hp);
                g.b.iter_mut().zip(&da).for_each(|(b, d)| *b += d);
                if need_dx {
                    matvec_t_add(&mut dx[t * din..(t + 1) * din], &layer.w, &da);
                }
                dh_next.fill(0.0);
                matvec_t_add(&mut dh_next, &layer.u, &da);
            }
        }
    }
    dx
}
