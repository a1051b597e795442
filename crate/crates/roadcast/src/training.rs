//! Loss, analytic backpropagation through time for stacked LSTM / SR-LSTM
//! models, finite-difference gradient verification, Adam optimisation with
//! global-norm clipping, and validation-based early stopping with
//! best-weight restore.
//!
//! Training is full batch: the dataset is ~90 yearly samples, so the
//! epoch gradient is the mean of per-sample gradients, accumulated in a
//! fixed order for bit-reproducibility.

use serde::{Deserialize, Serialize};

use crate::cells::{LayerParams, LstmParams, ModelSpec, SrParams, StepTrace};
use crate::dataprep::{Sample, WindowedDataset};
use crate::error::{Error, Result};
use crate::numeric::{Matrix, Rng};

/// Training hyperparameters. The defaults are the artifact's choices; the
/// source material fixes none of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub dropout_rate: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Fraction of the training set held out as the chronological tail.
    pub val_fraction: f64,
    pub seed: u64,
    /// Global gradient-norm clip guarding against exploding gradients.
    pub clip_norm: f64,
    /// Zeroes the regulatory-layer gradients so `W_r`, `b_r` stay at their
    /// initial values (used to pin an SR model to identity regulation).
    pub freeze_regulator: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 500,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            dropout_rate: 0.2,
            patience: 20,
            val_fraction: 0.2,
            seed: 42,
            clip_norm: 5.0,
            freeze_regulator: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Argument("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Argument("dropout rate outside [0, 1)".into()));
        }
        if self.patience == 0 {
            return Err(Error::Argument("patience must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Argument("max_epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || self.val_fraction == 0.0 {
            return Err(Error::Argument("val fraction outside (0, 1)".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Argument("clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// Mean squared error.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape("mse_loss", target.len(), pred.len()));
    }
    if pred.is_empty() {
        return Err(Error::Empty("mse_loss over empty vectors"));
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Gradient accumulators mirroring one layer's parameter blocks.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub w_f: Matrix,
    pub w_i: Matrix,
    pub w_c: Matrix,
    pub w_o: Matrix,
    pub b_f: Vec<f64>,
    pub b_i: Vec<f64>,
    pub b_c: Vec<f64>,
    pub b_o: Vec<f64>,
    pub w_r: Option<Matrix>,
    pub b_r: Option<Vec<f64>>,
}

/// Gradients for every parameter of a [`ModelSpec`], in the same layout.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
    pub w_out: Vec<f64>,
    pub b_out: f64,
}

impl Gradients {
    pub fn zeros_like(spec: &ModelSpec) -> Self {
        let layers = spec
            .layers
            .iter()
            .map(|layer| {
                let (h, d) = (layer.hidden(), layer.input());
                let sr = matches!(layer, LayerParams::Sr(_));
                LayerGrads {
                    w_f: Matrix::zeros(h, h + d),
                    w_i: Matrix::zeros(h, h + d),
                    w_c: Matrix::zeros(h, h + d),
                    w_o: Matrix::zeros(h, h + d),
                    b_f: vec![0.0; h],
                    b_i: vec![0.0; h],
                    b_c: vec![0.0; h],
                    b_o: vec![0.0; h],
                    w_r: sr.then(|| Matrix::zeros(h, h)),
                    b_r: sr.then(|| vec![0.0; h]),
                }
            })
            .collect();
        Gradients {
            layers,
            w_out: vec![0.0; spec.w_out.len()],
            b_out: 0.0,
        }
    }

    /// Elementwise accumulation; shapes must match.
    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            add_mat(&mut a.w_f, &b.w_f);
            add_mat(&mut a.w_i, &b.w_i);
            add_mat(&mut a.w_c, &b.w_c);
            add_mat(&mut a.w_o, &b.w_o);
            add_vec(&mut a.b_f, &b.b_f);
            add_vec(&mut a.b_i, &b.b_i);
            add_vec(&mut a.b_c, &b.b_c);
            add_vec(&mut a.b_o, &b.b_o);
            if let (Some(wa), Some(wb)) = (a.w_r.as_mut(), b.w_r.as_ref()) {
                add_mat(wa, wb);
            }
            if let (Some(va), Some(vb)) = (a.b_r.as_mut(), b.b_r.as_ref()) {
                add_vec(va, vb);
            }
        }
        add_vec(&mut self.w_out, &other.w_out);
        self.b_out += other.b_out;
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.layers.iter_mut() {
            for m in [&mut g.w_f, &mut g.w_i, &mut g.w_c, &mut g.w_o] {
                for v in m.data.iter_mut() {
                    *v *= factor;
                }
            }
            for b in [&mut g.b_f, &mut g.b_i, &mut g.b_c, &mut g.b_o] {
                for v in b.iter_mut() {
                    *v *= factor;
                }
            }
            if let Some(m) = g.w_r.as_mut() {
                for v in m.data.iter_mut() {
                    *v *= factor;
                }
            }
            if let Some(b) = g.b_r.as_mut() {
                for v in b.iter_mut() {
                    *v *= factor;
                }
            }
        }
        for v in self.w_out.iter_mut() {
            *v *= factor;
        }
        self.b_out *= factor;
    }

    /// Zeroes the regulatory-layer gradients.
    pub fn zero_regulator(&mut self) {
        for g in self.layers.iter_mut() {
            if let Some(m) = g.w_r.as_mut() {
                m.data.fill(0.0);
            }
            if let Some(b) = g.b_r.as_mut() {
                b.fill(0.0);
            }
        }
    }

    /// Serialises into the flat layout of [`ModelSpec::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend_from_slice(&g.w_f.data);
            out.extend_from_slice(&g.w_i.data);
            out.extend_from_slice(&g.w_c.data);
            out.extend_from_slice(&g.w_o.data);
            out.extend_from_slice(&g.b_f);
            out.extend_from_slice(&g.b_i);
            out.extend_from_slice(&g.b_c);
            out.extend_from_slice(&g.b_o);
            if let Some(m) = &g.w_r {
                out.extend_from_slice(&m.data);
            }
            if let Some(b) = &g.b_r {
                out.extend_from_slice(b);
            }
        }
        out.extend_from_slice(&self.w_out);
        out.push(self.b_out);
        out
    }
}

fn add_mat(a: &mut Matrix, b: &Matrix) {
    for (x, y) in a.data.iter_mut().zip(&b.data) {
        *x += y;
    }
}

fn add_vec(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn base_of(layer: &LayerParams) -> (&LstmParams, Option<&SrParams>) {
    match layer {
        LayerParams::Lstm(p) => (p, None),
        LayerParams::Sr(p) => (&p.base, Some(p)),
    }
}

/// Exact reverse-mode gradients of the squared error `(prediction − target)²`
/// with respect to every parameter, for one sample.
///
/// `traces` must come from [`ModelSpec::forward`] on the same model and
/// window, with the same dropout masks. The regulatory path through
/// `h_{t−1}` into the factor is included; the relu subgradient at 0 is 0.
pub fn backward_sequence(
    spec: &ModelSpec,
    window: &[Vec<f64>],
    target: f64,
    prediction: f64,
    traces: &[Vec<StepTrace>],
    masks: Option<&[Vec<f64>]>,
) -> Result<Gradients> {
    let n_layers = spec.layers.len();
    if traces.len() != n_layers {
        return Err(Error::shape("backward traces", n_layers, traces.len()));
    }
    let t_steps = window.len();
    for (l, layer_traces) in traces.iter().enumerate() {
        if layer_traces.len() != t_steps {
            return Err(Error::shape("backward trace steps", t_steps, layer_traces.len()));
        }
        if layer_traces
            .first()
            .map(|tr| tr.h_new.len() != spec.layers[l].hidden())
            .unwrap_or(false)
        {
            return Err(Error::shape(
                "backward trace width",
                spec.layers[l].hidden(),
                layer_traces[0].h_new.len(),
            ));
        }
    }

    let mut grads = Gradients::zeros_like(spec);
    let dpred = 2.0 * (prediction - target);
    let top = n_layers - 1;
    let top_hidden = spec.layers[top].hidden();

    // Readout consumed the (masked) final hidden state of the top layer.
    let final_h = &traces[top][t_steps - 1].h_new;
    for k in 0..top_hidden {
        let kept = match masks {
            Some(ms) => final_h[k] * ms[top][k],
            None => final_h[k],
        };
        grads.w_out[k] = dpred * kept;
    }
    grads.b_out = dpred;

    // Gradient w.r.t. each layer's masked output, per step. Only the final
    // step of the top layer receives signal from the readout.
    let mut d_above: Vec<Vec<f64>> = vec![vec![0.0; top_hidden]; t_steps];
    for k in 0..top_hidden {
        d_above[t_steps - 1][k] = dpred * spec.w_out[k];
    }

    for l in (0..n_layers).rev() {
        let (base, sr) = base_of(&spec.layers[l]);
        let h = base.hidden;
        let d = base.input;
        let lg = &mut grads.layers[l];

        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut d_inputs: Vec<Vec<f64>> = vec![Vec::new(); t_steps];

        for t in (0..t_steps).rev() {
            let tr = &traces[l][t];

            // Gradient reaching the raw hidden output: the inter-layer path
            // passes through this layer's dropout mask, the recurrent path
            // does not.
            let mut dh = dh_next.clone();
            match masks {
                Some(ms) => {
                    for k in 0..h {
                        dh[k] += d_above[t][k] * ms[l][k];
                    }
                }
                None => {
                    for k in 0..h {
                        dh[k] += d_above[t][k];
                    }
                }
            }

            let mut do_pre = vec![0.0; h];
            let mut dc = vec![0.0; h];
            for k in 0..h {
                let tanh_c = tr.c_new[k].tanh();
                do_pre[k] = dh[k] * tanh_c * tr.o[k] * (1.0 - tr.o[k]);
                dc[k] = dh[k] * tr.o[k] * (1.0 - tanh_c * tanh_c) + dc_next[k];
            }

            // For a plain LSTM the trace holds r = 1 and i_mod = i, so the
            // modified-gate formulas reduce to the standard ones.
            let mut df_pre = vec![0.0; h];
            let mut di_pre = vec![0.0; h];
            let mut dct_pre = vec![0.0; h];
            for k in 0..h {
                df_pre[k] = dc[k] * tr.c_prev[k] * tr.r[k] * tr.f[k] * (1.0 - tr.f[k]);
                di_pre[k] = dc[k] * tr.c_tilde[k] * tr.r[k] * tr.i[k] * (1.0 - tr.i[k]);
                dct_pre[k] = dc[k] * tr.i_mod[k] * (1.0 - tr.c_tilde[k] * tr.c_tilde[k]);
            }

            let dr_pre = sr.map(|srp| {
                let mut v = vec![0.0; h];
                for k in 0..h {
                    let dr = dc[k] * (tr.f[k] * tr.c_prev[k] + tr.i[k] * tr.c_tilde[k]);
                    v[k] = dr * srp.rho.derivative_from_output(tr.r[k]);
                }
                v
            });

            for k in 0..h {
                dc_next[k] = dc[k] * tr.f_mod[k];
            }

            let mut z = Vec::with_capacity(h + d);
            z.extend_from_slice(&tr.h_prev);
            z.extend_from_slice(&tr.x);

            lg.w_f.add_outer(&df_pre, &z);
            lg.w_i.add_outer(&di_pre, &z);
            lg.w_c.add_outer(&dct_pre, &z);
            lg.w_o.add_outer(&do_pre, &z);
            add_vec(&mut lg.b_f, &df_pre);
            add_vec(&mut lg.b_i, &di_pre);
            add_vec(&mut lg.b_c, &dct_pre);
            add_vec(&mut lg.b_o, &do_pre);

            let mut dz = base.w_f.mat_tvec(&df_pre)?;
            for (w, dg) in [
                (&base.w_i, &di_pre),
                (&base.w_c, &dct_pre),
                (&base.w_o, &do_pre),
            ] {
                let part = w.mat_tvec(dg)?;
                add_vec(&mut dz, &part);
            }

            dh_next.copy_from_slice(&dz[..h]);
            if let (Some(srp), Some(drp)) = (sr, dr_pre.as_ref()) {
                let through_r = srp.w_r.mat_tvec(drp)?;
                add_vec(&mut dh_next, &through_r);
                if let Some(m) = lg.w_r.as_mut() {
                    m.add_outer(drp, &tr.h_prev);
                }
                if let Some(b) = lg.b_r.as_mut() {
                    add_vec(b, drp);
                }
            }
            d_inputs[t] = dz[h..].to_vec();
        }

        if l > 0 {
            d_above = d_inputs;
        }
    }

    Ok(grads)
}

fn squared_error(spec: &ModelSpec, window: &[Vec<f64>], target: f64) -> Result<f64> {
    let (pred, _) = spec.forward(window, None)?;
    Ok((pred - target) * (pred - target))
}

/// Central-difference verification of [`backward_sequence`] over every
/// scalar parameter, with dropout disabled. Returns the maximum relative
/// error `|analytic − numeric| / max(1e−8, |analytic| + |numeric|)`.
pub fn grad_check(spec: &ModelSpec, window: &[Vec<f64>], target: f64, step: f64) -> Result<f64> {
    if step <= 0.0 {
        return Err(Error::Argument("finite-difference step must be positive".into()));
    }
    let (pred, traces) = spec.forward(window, None)?;
    if !pred.is_finite() {
        return Err(Error::NonFinite("grad_check loss"));
    }
    let analytic = backward_sequence(spec, window, target, pred, &traces, None)?.flatten();

    let mut work = spec.clone();
    let mut flat = spec.flatten();
    let mut max_rel = 0.0f64;
    for k in 0..flat.len() {
        let original = flat[k];
        flat[k] = original + step;
        work.load_flat(&flat)?;
        let plus = squared_error(&work, window, target)?;
        flat[k] = original - step;
        work.load_flat(&flat)?;
        let minus = squared_error(&work, window, target)?;
        flat[k] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("grad_check loss"));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let rel = (analytic[k] - numeric).abs() / (analytic[k].abs() + numeric.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

/// First/second-moment accumulators for Adam, flat over the parameter
/// vector of [`ModelSpec::flatten`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }
}

/// One Adam update with bias correction, in place over the flat parameter
/// vector.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape("adam_step", state.m.len(), format!("{}/{}", params.len(), grads.len())));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Degenerate("diverged: non-finite gradient".into()));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for k in 0..params.len() {
        let g = grads[k];
        state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g;
        state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[k] / bc1;
        let v_hat = state.v[k] / bc2;
        params[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// Scales `grads` so its global L2 norm does not exceed `max_norm`.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= factor;
        }
    }
}

/// Outcome of feeding one epoch's validation loss to the stopping rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Wait,
    Stop,
}

/// Early-stopping rule: stop once the validation loss has not improved for
/// `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_improvement: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_improvement: 0,
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.since_improvement = 0;
            StopDecision::Improved
        } else {
            self.since_improvement += 1;
            if self.since_improvement >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Wait
            }
        }
    }
}

/// Per-epoch losses recorded by [`fit`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct FitResult {
    /// Parameters restored from the best validation epoch.
    pub best_spec: ModelSpec,
    pub history: Vec<EpochLoss>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
}

fn mean_squared_over(spec: &ModelSpec, samples: &[Sample]) -> Result<f64> {
    let mut sum = 0.0;
    for s in samples {
        let (pred, _) = spec.forward(&s.window, None)?;
        let r = pred - s.target;
        sum += r * r;
    }
    Ok(sum / samples.len() as f64)
}

fn sample_masks(spec: &ModelSpec, rate: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
    let keep_scale = 1.0 / (1.0 - rate);
    spec.layers
        .iter()
        .map(|layer| {
            (0..layer.hidden())
                .map(|_| if rng.next_f64() < rate { 0.0 } else { keep_scale })
                .collect()
        })
        .collect()
}

/// Trains with full-batch Adam and early stopping.
///
/// The chronological tail `val_fraction` of `train` is held out for
/// validation; dropout masks are resampled each epoch from a child
/// generator of `cfg.seed`; the returned model is the one from the epoch
/// with the lowest validation loss.
pub fn fit(spec: &ModelSpec, train: &WindowedDataset, cfg: &TrainConfig) -> Result<FitResult> {
    cfg.validate()?;
    spec.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let n = train.len();
    let n_val = ((cfg.val_fraction * n as f64).floor() as usize).max(1);
    if n_val >= n {
        return Err(Error::Argument(format!(
            "val fraction {} leaves no training samples for {n} samples",
            cfg.val_fraction
        )));
    }
    let core = &train.samples[..n - n_val];
    let val = &train.samples[n - n_val..];

    let mut model = spec.clone();
    let mut adam = AdamState::new(model.param_count());
    let mut dropout_rng = Rng::new(cfg.seed).child("dropout");
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut history = Vec::new();
    let mut best_spec = model.clone();
    let mut best_epoch = 0;
    let mut stopped_epoch = 0;

    for epoch in 1..=cfg.max_epochs {
        stopped_epoch = epoch;
        let masks = if cfg.dropout_rate > 0.0 {
            Some(sample_masks(&model, cfg.dropout_rate, &mut dropout_rng))
        } else {
            None
        };
        let masks_ref = masks.as_deref();

        let mut acc = Gradients::zeros_like(&model);
        let mut train_loss = 0.0;
        for sample in core {
            let (pred, traces) = model.forward(&sample.window, masks_ref)?;
            let residual = pred - sample.target;
            train_loss += residual * residual;
            let g = backward_sequence(&model, &sample.window, sample.target, pred, &traces, masks_ref)?;
            acc.add(&g);
        }
        train_loss /= core.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        acc.scale(1.0 / core.len() as f64);
        if cfg.freeze_regulator {
            acc.zero_regulator();
        }
        let mut flat_grads = acc.flatten();
        clip_global_norm(&mut flat_grads, cfg.clip_norm);
        let mut flat_params = model.flatten();
        adam_step(&mut adam, &mut flat_params, &flat_grads, cfg)
            .map_err(|_| Error::Diverged { epoch })?;
        model.load_flat(&flat_params)?;

        let val_loss = mean_squared_over(&model, val)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        history.push(EpochLoss {
            epoch,
            train_loss,
            val_loss,
        });

        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => {
                best_spec = model.clone();
                best_epoch = epoch;
            }
            StopDecision::Wait => {}
            StopDecision::Stop => break,
        }
    }

    Ok(FitResult {
        best_spec,
        history,
        stopped_epoch,
        best_epoch,
    })
}

/// Inference-mode predictions (no dropout), one scalar per window, in the
/// same space the model was trained in.
pub fn predict(spec: &ModelSpec, dataset: &WindowedDataset) -> Result<Vec<f64>> {
    dataset
        .samples
        .iter()
        .map(|s| spec.forward(&s.window, None).map(|(pred, _)| pred))
        .collect()
}
