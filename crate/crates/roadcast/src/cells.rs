//! Forward computation for one LSTM or SR-LSTM time step, parameter
//! containers and initialization, and the whole-sequence stacked forward
//! pass that records per-step traces for backpropagation.
//!
//! Gate equations, on the concatenation `z = [h_prev, x]` (hidden first):
//!
//! ```text
//! f = σ(W_f·z + b_f)        i = σ(W_i·z + b_i)
//! c̃ = tanh(W_c·z + b_c)     o = σ(W_o·z + b_o)
//! c' = f ⊙ c + i ⊙ c̃        h' = o ⊙ tanh(c')
//! ```
//!
//! The self-regulating variant computes a regulatory factor from the
//! previous hidden state, `r = ρ(W_r·h_prev + b_r)`, rescales the forget
//! and input gates as `f' = f ⊙ r`, `i' = i ⊙ r`, and leaves the cell-state
//! update and output gate otherwise unchanged. With the default `ρ = relu`
//! the factor is unbounded above; that reading is implemented verbatim and
//! not clamped (`ρ = sigmoid` is available where a bounded factor is
//! preferred). The output gate is never regulated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Activation, Matrix, Rng};

/// Cell flavour selector, also used by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Lstm,
    Sr,
}

/// Gate weights and biases for one plain LSTM cell.
///
/// All four weight matrices have shape `hidden × (hidden + input)`; all
/// biases have length `hidden`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub hidden: usize,
    pub input: usize,
    pub w_f: Matrix,
    pub w_i: Matrix,
    pub w_c: Matrix,
    pub w_o: Matrix,
    pub b_f: Vec<f64>,
    pub b_i: Vec<f64>,
    pub b_c: Vec<f64>,
    pub b_o: Vec<f64>,
}

/// Plain LSTM parameters plus the regulatory layer `W_r`, `b_r`, `ρ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrParams {
    #[serde(flatten)]
    pub base: LstmParams,
    pub w_r: Matrix,
    pub b_r: Vec<f64>,
    pub rho: Activation,
}

/// One layer of a stacked model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerParams {
    Lstm(LstmParams),
    Sr(SrParams),
}

/// Hidden and cell state carried between time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl CellState {
    pub fn zeros(hidden: usize) -> Self {
        CellState {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// Every intermediate of one time step, retained for backpropagation.
///
/// For a plain LSTM `r` is all ones and `f_mod`/`i_mod` equal `f`/`i`.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub x: Vec<f64>,
    pub f: Vec<f64>,
    pub i: Vec<f64>,
    pub o: Vec<f64>,
    pub c_tilde: Vec<f64>,
    pub r: Vec<f64>,
    pub f_mod: Vec<f64>,
    pub i_mod: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub h_new: Vec<f64>,
    pub c_new: Vec<f64>,
}

/// A stack of cells with a single-unit affine regression readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerParams>,
    pub dropout_rate: f64,
    pub w_out: Vec<f64>,
    pub b_out: f64,
}

fn uniform_matrix(rng: &mut Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data.iter_mut() {
        *v = rng.uniform(-bound, bound).expect("valid bounds");
    }
    m
}

/// Uniform bound `√(6/(fan_in + fan_out))` for an `rows × cols` map.
pub fn init_bound(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

impl LstmParams {
    /// Draws gate weights uniformly from `[-s, s]` with
    /// `s = √(6/(fan_in + fan_out))`. The forget-gate bias starts at 1 so
    /// early training retains cell state; the other biases start at 0.
    pub fn init(rng: &mut Rng, input: usize, hidden: usize) -> Self {
        assert!(input >= 1 && hidden >= 1, "cell sizes must be positive");
        let s = init_bound(hidden, hidden + input);
        LstmParams {
            hidden,
            input,
            w_f: uniform_matrix(rng, hidden, hidden + input, s),
            w_i: uniform_matrix(rng, hidden, hidden + input, s),
            w_c: uniform_matrix(rng, hidden, hidden + input, s),
            w_o: uniform_matrix(rng, hidden, hidden + input, s),
            b_f: vec![1.0; hidden],
            b_i: vec![0.0; hidden],
            b_c: vec![0.0; hidden],
            b_o: vec![0.0; hidden],
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            hidden,
            input,
            w_f: Matrix::zeros(hidden, hidden + input),
            w_i: Matrix::zeros(hidden, hidden + input),
            w_c: Matrix::zeros(hidden, hidden + input),
            w_o: Matrix::zeros(hidden, hidden + input),
            b_f: vec![0.0; hidden],
            b_i: vec![0.0; hidden],
            b_c: vec![0.0; hidden],
            b_o: vec![0.0; hidden],
        }
    }
}

impl SrParams {
    /// As [`LstmParams::init`], plus `W_r` drawn with the same rule and
    /// `b_r = 1` so the initial factor `ρ(b_r) ≈ 1` starts near identity
    /// regulation.
    pub fn init(rng: &mut Rng, input: usize, hidden: usize) -> Self {
        let base = LstmParams::init(rng, input, hidden);
        let s = init_bound(hidden, hidden);
        SrParams {
            base,
            w_r: uniform_matrix(rng, hidden, hidden, s),
            b_r: vec![1.0; hidden],
            rho: Activation::Relu,
        }
    }
}

impl LayerParams {
    pub fn init(rng: &mut Rng, input: usize, hidden: usize, variant: Variant) -> Self {
        match variant {
            Variant::Lstm => LayerParams::Lstm(LstmParams::init(rng, input, hidden)),
            Variant::Sr => LayerParams::Sr(SrParams::init(rng, input, hidden)),
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            LayerParams::Lstm(p) => p.hidden,
            LayerParams::Sr(p) => p.base.hidden,
        }
    }

    pub fn input(&self) -> usize {
        match self {
            LayerParams::Lstm(p) => p.input,
            LayerParams::Sr(p) => p.base.input,
        }
    }

    pub fn step(&self, state: &CellState, x: &[f64]) -> Result<(CellState, StepTrace)> {
        match self {
            LayerParams::Lstm(p) => lstm_step(p, state, x),
            LayerParams::Sr(p) => sr_lstm_step(p, state, x),
        }
    }
}

fn gate(
    w: &Matrix,
    b: &[f64],
    z: &[f64],
    activation: Activation,
) -> Result<Vec<f64>> {
    let mut pre = w.mat_vec(z)?;
    for (p, bi) in pre.iter_mut().zip(b) {
        *p = activation.apply(*p + bi)?;
    }
    Ok(pre)
}

fn check_step_shapes(p: &LstmParams, state: &CellState, x: &[f64]) -> Result<()> {
    if x.len() != p.input {
        return Err(Error::shape("cell step input", p.input, x.len()));
    }
    if state.h.len() != p.hidden || state.c.len() != p.hidden {
        return Err(Error::shape(
            "cell step state",
            p.hidden,
            format!("h={}, c={}", state.h.len(), state.c.len()),
        ));
    }
    Ok(())
}

fn finish_step(
    p: &LstmParams,
    state: &CellState,
    x: &[f64],
    z: &[f64],
    f: Vec<f64>,
    i: Vec<f64>,
    r: Vec<f64>,
) -> Result<(CellState, StepTrace)> {
    let c_tilde = gate(&p.w_c, &p.b_c, z, Activation::Tanh)?;
    let o = gate(&p.w_o, &p.b_o, z, Activation::Sigmoid)?;

    let mut f_mod = f.clone();
    let mut i_mod = i.clone();
    for k in 0..p.hidden {
        f_mod[k] = f[k] * r[k];
        i_mod[k] = i[k] * r[k];
    }

    let mut c_new = vec![0.0; p.hidden];
    let mut h_new = vec![0.0; p.hidden];
    for k in 0..p.hidden {
        c_new[k] = f_mod[k] * state.c[k] + i_mod[k] * c_tilde[k];
        h_new[k] = o[k] * c_new[k].tanh();
    }

    let trace = StepTrace {
        x: x.to_vec(),
        f,
        i,
        o,
        c_tilde,
        r,
        f_mod,
        i_mod,
        h_prev: state.h.clone(),
        c_prev: state.c.clone(),
        h_new: h_new.clone(),
        c_new: c_new.clone(),
    };
    Ok((CellState { h: h_new, c: c_new }, trace))
}

/// One plain LSTM step.
pub fn lstm_step(p: &LstmParams, state: &CellState, x: &[f64]) -> Result<(CellState, StepTrace)> {
    check_step_shapes(p, state, x)?;
    let mut z = Vec::with_capacity(p.hidden + p.input);
    z.extend_from_slice(&state.h);
    z.extend_from_slice(x);
    let f = gate(&p.w_f, &p.b_f, &z, Activation::Sigmoid)?;
    let i = gate(&p.w_i, &p.b_i, &z, Activation::Sigmoid)?;
    finish_step(p, state, x, &z, f, i, vec![1.0; p.hidden])
}

/// One self-regulating step: the forget and input gates are rescaled by
/// `r = ρ(W_r·h_prev + b_r)` before the cell-state update.
pub fn sr_lstm_step(p: &SrParams, state: &CellState, x: &[f64]) -> Result<(CellState, StepTrace)> {
    check_step_shapes(&p.base, state, x)?;
    let base = &p.base;
    let mut z = Vec::with_capacity(base.hidden + base.input);
    z.extend_from_slice(&state.h);
    z.extend_from_slice(x);
    let f = gate(&base.w_f, &base.b_f, &z, Activation::Sigmoid)?;
    let i = gate(&base.w_i, &base.b_i, &z, Activation::Sigmoid)?;
    let r = gate(&p.w_r, &p.b_r, &state.h, p.rho)?;
    finish_step(base, state, x, &z, f, i, r)
}

impl ModelSpec {
    /// Builds a stacked model: `layers` cells of width `hidden` over
    /// `input` features, plus a single-unit affine readout.
    pub fn init(
        rng: &mut Rng,
        input: usize,
        hidden: usize,
        layers: usize,
        variant: Variant,
        dropout_rate: f64,
    ) -> Self {
        assert!(layers >= 1, "need at least one layer");
        assert!((0.0..1.0).contains(&dropout_rate), "dropout rate in [0, 1)");
        let mut stack = Vec::with_capacity(layers);
        for l in 0..layers {
            let d = if l == 0 { input } else { hidden };
            stack.push(LayerParams::init(rng, d, hidden, variant));
        }
        let s = init_bound(1, hidden + 1);
        let w_out = (0..hidden)
            .map(|_| rng.uniform(-s, s).expect("valid bounds"))
            .collect();
        ModelSpec {
            layers: stack,
            dropout_rate,
            w_out,
            b_out: 0.0,
        }
    }

    /// Feature count expected by the first layer.
    pub fn input_size(&self) -> usize {
        self.layers[0].input()
    }

    /// Checks inter-layer width chaining and the readout width.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Empty("model has no layers"));
        }
        for (l, pair) in self.layers.windows(2).enumerate() {
            if pair[1].input() != pair[0].hidden() {
                return Err(Error::shape(
                    "layer chaining",
                    pair[0].hidden(),
                    format!("layer {} input {}", l + 1, pair[1].input()),
                ));
            }
        }
        let top = self.layers.last().expect("non-empty").hidden();
        if self.w_out.len() != top {
            return Err(Error::shape("readout width", top, self.w_out.len()));
        }
        Ok(())
    }

    /// Runs the stack over a window and returns the scalar prediction and
    /// the per-layer, per-step traces.
    ///
    /// `masks`, present only in training mode, holds one pre-scaled keep
    /// vector per layer (entries `0` or `1/(1−rate)`); it is applied to each
    /// layer's hidden output before the next layer and before the readout,
    /// never to the recurrent connection.
    pub fn forward(
        &self,
        window: &[Vec<f64>],
        masks: Option<&[Vec<f64>]>,
    ) -> Result<(f64, Vec<Vec<StepTrace>>)> {
        self.validate()?;
        if window.is_empty() {
            return Err(Error::Empty("forward over empty window"));
        }
        if let Some(ms) = masks {
            if ms.len() != self.layers.len() {
                return Err(Error::shape("dropout masks", self.layers.len(), ms.len()));
            }
            for (l, m) in ms.iter().enumerate() {
                if m.len() != self.layers[l].hidden() {
                    return Err(Error::shape(
                        "dropout mask width",
                        self.layers[l].hidden(),
                        m.len(),
                    ));
                }
            }
        }

        let mut states: Vec<CellState> = self
            .layers
            .iter()
            .map(|l| CellState::zeros(l.hidden()))
            .collect();
        let mut traces: Vec<Vec<StepTrace>> = vec![Vec::with_capacity(window.len()); self.layers.len()];
        let mut top_out = vec![0.0; self.layers.last().expect("non-empty").hidden()];

        for x in window {
            if x.len() != self.input_size() {
                return Err(Error::shape("window features", self.input_size(), x.len()));
            }
            let mut feed = x.clone();
            for (l, layer) in self.layers.iter().enumerate() {
                let (state, trace) = layer.step(&states[l], &feed)?;
                let mut out = state.h.clone();
                if let Some(ms) = masks {
                    for (v, m) in out.iter_mut().zip(&ms[l]) {
                        *v *= m;
                    }
                }
                states[l] = state;
                traces[l].push(trace);
                feed = out;
            }
            top_out = feed;
        }

        let mut pred = self.b_out;
        for (w, h) in self.w_out.iter().zip(&top_out) {
            pred += w * h;
        }
        Ok((pred, traces))
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let mut n = self.w_out.len() + 1;
        for layer in &self.layers {
            let (h, d) = (layer.hidden(), layer.input());
            n += 4 * h * (h + d) + 4 * h;
            if matches!(layer, LayerParams::Sr(_)) {
                n += h * h + h;
            }
        }
        n
    }

    /// Serialises every parameter into one flat vector. The layout is
    /// per layer `[w_f, w_i, w_c, w_o, b_f, b_i, b_c, b_o, (w_r, b_r)]`
    /// row-major, followed by `[w_out, b_out]`; `load_flat` and the
    /// optimiser rely on this order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            match layer {
                LayerParams::Lstm(p) => flatten_base(p, &mut out),
                LayerParams::Sr(p) => {
                    flatten_base(&p.base, &mut out);
                    out.extend_from_slice(&p.w_r.data);
                    out.extend_from_slice(&p.b_r);
                }
            }
        }
        out.extend_from_slice(&self.w_out);
        out.push(self.b_out);
        out
    }

    /// Restores parameters from a flat vector produced by [`flatten`].
    ///
    /// [`flatten`]: ModelSpec::flatten
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape("flat parameters", self.param_count(), flat.len()));
        }
        let mut pos = 0;
        let mut take = |n: usize| {
            let s = &flat[pos..pos + n];
            pos += n;
            s
        };
        for layer in &mut self.layers {
            match layer {
                LayerParams::Lstm(p) => load_base(p, &mut take),
                LayerParams::Sr(p) => {
                    load_base(&mut p.base, &mut take);
                    let n = p.w_r.data.len();
                    p.w_r.data.copy_from_slice(take(n));
                    let n = p.b_r.len();
                    p.b_r.copy_from_slice(take(n));
                }
            }
        }
        let n = self.w_out.len();
        self.w_out.copy_from_slice(take(n));
        self.b_out = take(1)[0];
        Ok(())
    }
}

fn flatten_base(p: &LstmParams, out: &mut Vec<f64>) {
    out.extend_from_slice(&p.w_f.data);
    out.extend_from_slice(&p.w_i.data);
    out.extend_from_slice(&p.w_c.data);
    out.extend_from_slice(&p.w_o.data);
    out.extend_from_slice(&p.b_f);
    out.extend_from_slice(&p.b_i);
    out.extend_from_slice(&p.b_c);
    out.extend_from_slice(&p.b_o);
}

fn load_base<'a>(p: &mut LstmParams, take: &mut impl FnMut(usize) -> &'a [f64]) {
    let w = p.w_f.data.len();
    p.w_f.data.copy_from_slice(take(w));
    p.w_i.data.copy_from_slice(take(w));
    p.w_c.data.copy_from_slice(take(w));
    p.w_o.data.copy_from_slice(take(w));
    let h = p.hidden;
    p.b_f.copy_from_slice(take(h));
    p.b_i.copy_from_slice(take(h));
    p.b_c.copy_from_slice(take(h));
    p.b_o.copy_from_slice(take(h));
}

/// Checkpoint format version for the parameter JSON.
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_spec(input: usize, hidden: usize, layers: usize) -> ModelSpec {
        ModelSpec {
            layers: (0..layers)
                .map(|l| {
                    let d = if l == 0 { input } else { hidden };
                    LayerParams::Lstm(LstmParams::zeros(d, hidden))
                })
                .collect(),
            dropout_rate: 0.0,
            w_out: vec![0.0; hidden],
            b_out: 0.0,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = LstmParams::init(&mut Rng::new(42), 3, 2);
        let b = LstmParams::init(&mut Rng::new(42), 3, 2);
        assert_eq!(a, b);
        let sa = SrParams::init(&mut Rng::new(42), 3, 2);
        let sb = SrParams::init(&mut Rng::new(42), 3, 2);
        assert_eq!(sa, sb);
    }

    #[test]
    fn init_bias_convention() {
        let p = SrParams::init(&mut Rng::new(1), 4, 3);
        assert_eq!(p.base.b_f, vec![1.0; 3]);
        assert_eq!(p.base.b_i, vec![0.0; 3]);
        assert_eq!(p.base.b_c, vec![0.0; 3]);
        assert_eq!(p.base.b_o, vec![0.0; 3]);
        assert_eq!(p.b_r, vec![1.0; 3]);
    }

    #[test]
    fn init_weights_within_bound() {
        let (d, h) = (5, 4);
        let p = LstmParams::init(&mut Rng::new(7), d, h);
        // fan_in = h + d inputs, fan_out = h outputs
        let s = (6.0 / ((h + d) + h) as f64).sqrt();
        for m in [&p.w_f, &p.w_i, &p.w_c, &p.w_o] {
            for &v in &m.data {
                assert!(v.abs() <= s, "|{v}| > {s}");
            }
        }
        let sr = SrParams::init(&mut Rng::new(7), d, h);
        let s_r = (6.0 / (h + h) as f64).sqrt();
        for &v in &sr.w_r.data {
            assert!(v.abs() <= s_r);
        }
    }

    #[test]
    fn zero_params_step_hand_case() {
        // All weights/biases zero, h=0, c=[2]: f=i=o=0.5, c̃=0,
        // c' = 0.5·2 = 1, h' = 0.5·tanh(1)
        let p = LstmParams::zeros(1, 1);
        let state = CellState {
            h: vec![0.0],
            c: vec![2.0],
        };
        let (next, trace) = lstm_step(&p, &state, &[13.7]).unwrap();
        assert_eq!(trace.f, vec![0.5]);
        assert_eq!(trace.i, vec![0.5]);
        assert_eq!(trace.o, vec![0.5]);
        assert_eq!(trace.c_tilde, vec![0.0]);
        assert_eq!(next.c, vec![1.0]);
        let expected = 0.5 * 1.0f64.tanh();
        assert!((next.h[0] - expected).abs() < 1e-12);
        assert!((next.h[0] - 0.380797).abs() < 1e-6);
    }

    #[test]
    fn zero_params_zero_state_is_fixed_point() {
        let p = LstmParams::zeros(2, 3);
        let (next, _) = lstm_step(&p, &CellState::zeros(3), &[0.0, 0.0]).unwrap();
        assert_eq!(next.c, vec![0.0; 3]);
        assert_eq!(next.h, vec![0.0; 3]);
    }

    #[test]
    fn gate_ranges_hold_for_random_params() {
        let mut rng = Rng::new(99);
        let p = LstmParams::init(&mut rng, 3, 4);
        let mut state = CellState::zeros(4);
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.uniform(-2.0, 2.0).unwrap()).collect();
            let (next, trace) = lstm_step(&p, &state, &x).unwrap();
            for k in 0..4 {
                assert!(trace.f[k] > 0.0 && trace.f[k] < 1.0);
                assert!(trace.i[k] > 0.0 && trace.i[k] < 1.0);
                assert!(trace.o[k] > 0.0 && trace.o[k] < 1.0);
                assert!(trace.c_tilde[k].abs() < 1.0);
                assert!(next.h[k].abs() < 1.0);
            }
            state = next;
        }
    }

    #[test]
    fn identity_regulation_reduces_to_lstm() {
        let mut rng = Rng::new(5);
        let base = LstmParams::init(&mut rng, 3, 4);
        let sr = SrParams {
            base: base.clone(),
            w_r: Matrix::zeros(4, 4),
            b_r: vec![1.0; 4],
            rho: Activation::Relu,
        };
        let mut s_l = CellState::zeros(4);
        let mut s_r = CellState::zeros(4);
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0).unwrap()).collect();
            let (nl, _) = lstm_step(&base, &s_l, &x).unwrap();
            let (nr, _) = sr_lstm_step(&sr, &s_r, &x).unwrap();
            assert_eq!(nl, nr);
            s_l = nl;
            s_r = nr;
        }
    }

    #[test]
    fn zero_regulation_erases_memory() {
        let mut rng = Rng::new(6);
        let mut sr = SrParams::init(&mut rng, 2, 3);
        sr.w_r = Matrix::zeros(3, 3);
        sr.b_r = vec![0.0; 3];
        let state = CellState {
            h: vec![0.0; 3],
            c: vec![5.0, -2.0, 9.0],
        };
        let (next, trace) = sr_lstm_step(&sr, &state, &[1.0, -1.0]).unwrap();
        assert_eq!(trace.r, vec![0.0; 3]);
        assert_eq!(next.c, vec![0.0; 3]);
        assert_eq!(next.h, vec![0.0; 3]);
    }

    #[test]
    fn sr_step_matches_independent_reevaluation() {
        // Recompute r, f', i', c', h' by hand from the trace intermediates.
        let mut rng = Rng::new(17);
        let p = SrParams::init(&mut rng, 3, 2);
        let state = CellState {
            h: vec![0.3, -0.2],
            c: vec![0.7, 1.1],
        };
        let x = vec![0.5, -1.5, 2.0];
        let (next, t) = sr_lstm_step(&p, &state, &x).unwrap();

        for k in 0..2 {
            let mut a_r = p.b_r[k];
            for j in 0..2 {
                a_r += p.w_r.data[k * 2 + j] * state.h[j];
            }
            let r = a_r.max(0.0);
            assert!((t.r[k] - r).abs() < 1e-12);
            let f_mod = t.f[k] * r;
            let i_mod = t.i[k] * r;
            assert!((t.f_mod[k] - f_mod).abs() < 1e-12);
            assert!((t.i_mod[k] - i_mod).abs() < 1e-12);
            let c_new = f_mod * state.c[k] + i_mod * t.c_tilde[k];
            assert!((next.c[k] - c_new).abs() < 1e-12);
            assert!((next.h[k] - t.o[k] * c_new.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn cell_state_decays_geometrically_when_candidate_is_zero() {
        // w_c = 0, b_c = 0 gives c̃ = 0 exactly, so c' = σ(b_f)·c each step.
        let mut p = LstmParams::zeros(1, 1);
        p.b_f = vec![-0.4];
        let phi = crate::numeric::sigmoid(-0.4);
        let c0 = 3.5;
        let mut state = CellState {
            h: vec![0.0],
            c: vec![c0],
        };
        let mut expected = c0;
        for _ in 0..12 {
            let (next, _) = lstm_step(&p, &state, &[0.9]).unwrap();
            expected *= phi;
            assert!(next.c[0] == expected, "exact geometric decay");
            // zero out h so the forget gate stays exactly σ(b_f)
            state = CellState {
                h: vec![0.0],
                c: next.c,
            };
        }
    }

    #[test]
    fn forward_zero_params_predicts_bias() {
        let mut spec = zero_spec(2, 3, 1);
        spec.b_out = 4.25;
        let window = vec![vec![1.0, -2.0], vec![0.5, 0.5]];
        let (pred, traces) = spec.forward(&window, None).unwrap();
        assert_eq!(pred, 4.25);
        assert_eq!(traces.len(), 1);
        assert_eq!(traces[0].len(), 2);
    }

    #[test]
    fn forward_rejects_empty_window_and_bad_masks() {
        let spec = zero_spec(2, 3, 2);
        assert!(spec.forward(&[], None).is_err());
        let window = vec![vec![0.0, 0.0]];
        assert!(spec.forward(&window, Some(&[vec![1.0; 3]])).is_err());
        assert!(spec
            .forward(&window, Some(&[vec![1.0; 3], vec![1.0; 2]]))
            .is_err());
    }

    #[test]
    fn all_ones_masks_match_inference() {
        let mut rng = Rng::new(11);
        let spec = ModelSpec::init(&mut rng, 2, 4, 2, Variant::Sr, 0.0);
        let window: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..2).map(|_| rng.uniform(-1.0, 1.0).unwrap()).collect())
            .collect();
        let masks = vec![vec![1.0; 4], vec![1.0; 4]];
        let (a, _) = spec.forward(&window, None).unwrap();
        let (b, _) = spec.forward(&window, Some(&masks)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn two_layer_forward_matches_manual_unroll() {
        // H=1, D=1, L=2, hand-set parameters, unrolled with straight-line
        // arithmetic below.
        let mk = |w_f: [f64; 2], w_i: [f64; 2], w_c: [f64; 2], w_o: [f64; 2], b: [f64; 4]| {
            LstmParams {
                hidden: 1,
                input: 1,
                w_f: Matrix::from_rows(&[&w_f]),
                w_i: Matrix::from_rows(&[&w_i]),
                w_c: Matrix::from_rows(&[&w_c]),
                w_o: Matrix::from_rows(&[&w_o]),
                b_f: vec![b[0]],
                b_i: vec![b[1]],
                b_c: vec![b[2]],
                b_o: vec![b[3]],
            }
        };
        let l0 = mk([0.5, -0.3], [0.2, 0.4], [-0.6, 0.7], [0.1, 0.9], [0.05, -0.1, 0.2, 0.0]);
        let l1 = mk([-0.2, 0.8], [0.3, -0.5], [0.6, 0.1], [-0.4, 0.25], [0.0, 0.15, -0.3, 0.1]);
        let spec = ModelSpec {
            layers: vec![LayerParams::Lstm(l0.clone()), LayerParams::Lstm(l1.clone())],
            dropout_rate: 0.0,
            w_out: vec![1.7],
            b_out: -0.25,
        };
        let window = vec![vec![0.8], vec![-1.2]];
        let (pred, _) = spec.forward(&window, None).unwrap();

        let sig = crate::numeric::sigmoid;
        let step = |p: &LstmParams, h: f64, c: f64, x: f64| {
            let f = sig(p.w_f.data[0] * h + p.w_f.data[1] * x + p.b_f[0]);
            let i = sig(p.w_i.data[0] * h + p.w_i.data[1] * x + p.b_i[0]);
            let ct = (p.w_c.data[0] * h + p.w_c.data[1] * x + p.b_c[0]).tanh();
            let o = sig(p.w_o.data[0] * h + p.w_o.data[1] * x + p.b_o[0]);
            let c_new = f * c + i * ct;
            (o * c_new.tanh(), c_new)
        };
        let (h0a, c0a) = step(&l0, 0.0, 0.0, 0.8);
        let (h1a, c1a) = step(&l1, 0.0, 0.0, h0a);
        let (h0b, _) = step(&l0, h0a, c0a, -1.2);
        let (h1b, _) = step(&l1, h1a, c1a, h0b);
        let expected = 1.7 * h1b - 0.25;
        assert!((pred - expected).abs() < 1e-12, "{pred} vs {expected}");
    }

    #[test]
    fn flatten_roundtrip_preserves_model() {
        let mut rng = Rng::new(3);
        let spec = ModelSpec::init(&mut rng, 3, 4, 2, Variant::Sr, 0.2);
        let flat = spec.flatten();
        assert_eq!(flat.len(), spec.param_count());
        let mut other = ModelSpec::init(&mut Rng::new(4), 3, 4, 2, Variant::Sr, 0.2);
        other.load_flat(&flat).unwrap();
        assert_eq!(spec, other);
    }

    #[test]
    fn checkpoint_json_roundtrip() {
        let mut rng = Rng::new(21);
        let spec = ModelSpec::init(&mut rng, 2, 3, 2, Variant::Sr, 0.1);
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"kind\":\"sr\""));
        let back: ModelSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
    }
}
