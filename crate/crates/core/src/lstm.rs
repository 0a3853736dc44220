//! Stacked LSTM encoder-decoder with a dropout layer after every LSTM layer.
//!
//! The encoder runs forward over the window and hands the top layer's final
//! `(h, c)` to the first decoder layer. The decoder emits the reconstruction
//! in reverse order: step `s` produces row `L-1-s`. Its first input is the zero
//! vector; afterwards it consumes either the true previous row (teacher
//! forcing, used for training) or its own previous estimate (inference).
//! Decoder layer sizes mirror the encoder's.
//!
//! Dropout acts on the hidden-state sequence handed upward (or to the output
//! projection), element-wise per unit and time step. Cell states and the
//! recurrent `h` fed back into the same layer are never dropped.

use serde::{Deserialize, Serialize};

use crate::dropout::{check_probability, draw_mask, DropoutMode};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Matrix, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub window_len: usize,
    pub encoder_units: Vec<usize>,
    pub dropout_p: f64,
    #[serde(default)]
    pub dropout_mode: DropoutMode,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(input_dim: usize, window_len: usize, encoder_units: Vec<usize>) -> Self {
        Self {
            input_dim,
            window_len,
            encoder_units,
            dropout_p: 0.0,
            dropout_mode: DropoutMode::Inverted,
            seed: 0,
        }
    }

    pub fn with_dropout(mut self, p: f64, mode: DropoutMode) -> Self {
        self.dropout_p = p;
        self.dropout_mode = mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be at least 1".into()));
        }
        if self.window_len < 2 {
            return Err(Error::Config(format!("window_len must be at least 2, got {}", self.window_len)));
        }
        if self.encoder_units.is_empty() {
            return Err(Error::Config("at least one encoder layer is required".into()));
        }
        if self.encoder_units.contains(&0) {
            return Err(Error::Config(format!("layer sizes must be positive: {:?}", self.encoder_units)));
        }
        check_probability(self.dropout_p)
    }

    pub fn layers(&self) -> usize {
        self.encoder_units.len()
    }

    pub fn decoder_units(&self) -> Vec<usize> {
        self.encoder_units.iter().rev().copied().collect()
    }

    pub fn latent_size(&self) -> usize {
        *self.encoder_units.last().expect("validated config has layers")
    }

    fn keep_divisor(&self) -> f64 {
        self.dropout_mode.keep_divisor(self.dropout_p)
    }

    fn check_window(&self, window: &Matrix) -> Result<()> {
        if window.shape() != (self.window_len, self.input_dim) {
            return Err(Error::shape("window", window.shape(), (self.window_len, self.input_dim)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Input,
    Forget,
    Output,
    Candidate,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Input, Gate::Forget, Gate::Output, Gate::Candidate];

    pub fn name(self) -> &'static str {
        match self {
            Gate::Input => "input",
            Gate::Forget => "forget",
            Gate::Output => "output",
            Gate::Candidate => "candidate",
        }
    }
}

const I: usize = 0;
const F: usize = 1;
const O: usize = 2;
const G: usize = 3;

/// Weights of one LSTM layer, indexed by [`Gate`] in `Gate::ALL` order.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayerParams {
    /// `units x in_dim`
    pub w: [Matrix; 4],
    /// `units x units`
    pub u: [Matrix; 4],
    /// `units x 1`
    pub b: [Matrix; 4],
}

impl LstmLayerParams {
    pub fn zeros(in_dim: usize, units: usize) -> Self {
        Self {
            w: std::array::from_fn(|_| Matrix::zeros(units, in_dim)),
            u: std::array::from_fn(|_| Matrix::zeros(units, units)),
            b: std::array::from_fn(|_| Matrix::zeros(units, 1)),
        }
    }

    pub fn units(&self) -> usize {
        self.w[0].rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w[0].cols()
    }

    pub fn w(&self, g: Gate) -> &Matrix {
        &self.w[g as usize]
    }

    pub fn u(&self, g: Gate) -> &Matrix {
        &self.u[g as usize]
    }

    pub fn b(&self, g: Gate) -> &Matrix {
        &self.b[g as usize]
    }
}

/// All trainable tensors. Gradients use the same layout ([`ParamGrads`]).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: Vec<LstmLayerParams>,
    pub decoder: Vec<LstmLayerParams>,
    /// `input_dim x last decoder units`
    pub output_w: Matrix,
    /// `input_dim x 1`
    pub output_b: Matrix,
}

pub type ParamGrads = ModelParams;

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let n = config.input_dim;
        let mut encoder = Vec::with_capacity(config.layers());
        let mut in_dim = n;
        for &u in &config.encoder_units {
            encoder.push(LstmLayerParams::zeros(in_dim, u));
            in_dim = u;
        }
        let mut decoder = Vec::with_capacity(config.layers());
        let mut in_dim = n;
        for u in config.decoder_units() {
            decoder.push(LstmLayerParams::zeros(in_dim, u));
            in_dim = u;
        }
        Self { encoder, decoder, output_w: Matrix::zeros(n, in_dim), output_b: Matrix::zeros(n, 1) }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.as_mut_slice().fill(0.0);
        }
        z
    }

    /// Tensors with stable names, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (side, layers) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            for (k, layer) in layers.iter().enumerate() {
                for g in Gate::ALL {
                    out.push((format!("{side}.{k}.W_{}", g.name()), layer.w(g)));
                }
                for g in Gate::ALL {
                    out.push((format!("{side}.{k}.U_{}", g.name()), layer.u(g)));
                }
                for g in Gate::ALL {
                    out.push((format!("{side}.{k}.b_{}", g.name()), layer.b(g)));
                }
            }
        }
        out.push(("output.W".to_string(), &self.output_w));
        out.push(("output.b".to_string(), &self.output_b));
        out
    }

    /// Same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for layer in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            out.extend(layer.w.iter_mut());
            out.extend(layer.u.iter_mut());
            out.extend(layer.b.iter_mut());
        }
        out.push(&mut self.output_w);
        out.push(&mut self.output_b);
        out
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn same_shapes(&self, other: &ModelParams) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.shape() == y.shape())
    }

    pub fn check_shapes(&self, other: &ModelParams, op: &'static str) -> Result<()> {
        let a = self.tensors();
        let b = other.tensors();
        if a.len() != b.len() {
            return Err(Error::shape(op, (a.len(), 0), (b.len(), 0)));
        }
        for (x, y) in a.iter().zip(&b) {
            if x.shape() != y.shape() {
                return Err(Error::shape(op, x.shape(), y.shape()));
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &ModelParams) -> Result<()> {
        self.check_shapes(other, "ModelParams::add_assign")?;
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.as_mut_slice().iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.as_slice().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Uniform `[-1/sqrt(u), 1/sqrt(u)]` weights, forget bias 1, other biases 0.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut params = ModelParams::zeros(config);
    let mut rng = Rng::derive(&[config.seed, 0x1A17]);
    for layer in params.encoder.iter_mut().chain(params.decoder.iter_mut()) {
        let k = 1.0 / (layer.units() as f64).sqrt();
        for m in layer.w.iter_mut().chain(layer.u.iter_mut()) {
            m.as_mut_slice().iter_mut().for_each(|x| *x = rng.uniform_range(-k, k));
        }
        layer.b[F].as_mut_slice().fill(1.0);
    }
    let k = 1.0 / (params.output_w.cols() as f64).sqrt();
    params.output_w.as_mut_slice().iter_mut().for_each(|x| *x = rng.uniform_range(-k, k));
    Ok(params)
}

/// Everything the backward pass needs from one cell evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct StepCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    /// Gate pre-activations, `Gate::ALL` order.
    pub pre: [Vec<f64>; 4],
    /// Gate activations: sigmoid for input/forget/output, tanh for candidate.
    pub act: [Vec<f64>; 4],
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

fn cell_forward(layer: &LstmLayerParams, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> StepCache {
    let pre: [Vec<f64>; 4] = std::array::from_fn(|g| {
        let mut z = layer.b[g].as_slice().to_vec();
        layer.w[g].gemv_acc(x, &mut z);
        layer.u[g].gemv_acc(h_prev, &mut z);
        z
    });
    let act: [Vec<f64>; 4] = std::array::from_fn(|g| {
        if g == G {
            pre[g].iter().map(|v| v.tanh()).collect()
        } else {
            pre[g].iter().map(|&v| sigmoid(v)).collect()
        }
    });
    let units = h_prev.len();
    let mut c = Vec::with_capacity(units);
    let mut tanh_c = Vec::with_capacity(units);
    let mut h = Vec::with_capacity(units);
    for j in 0..units {
        let cj = act[F][j] * c_prev[j] + act[I][j] * act[G][j];
        let tj = cj.tanh();
        c.push(cj);
        tanh_c.push(tj);
        h.push(act[O][j] * tj);
    }
    StepCache { x: x.to_vec(), h_prev: h_prev.to_vec(), c_prev: c_prev.to_vec(), pre, act, c, tanh_c, h }
}

/// One LSTM recurrence step on column vectors.
pub fn lstm_cell_step(
    layer: &LstmLayerParams,
    x_t: &Matrix,
    h_prev: &Matrix,
    c_prev: &Matrix,
) -> Result<(Matrix, Matrix, StepCache)> {
    let u = layer.units();
    if x_t.shape() != (layer.input_dim(), 1) {
        return Err(Error::shape("lstm_cell_step input", x_t.shape(), (layer.input_dim(), 1)));
    }
    if h_prev.shape() != (u, 1) {
        return Err(Error::shape("lstm_cell_step hidden", h_prev.shape(), (u, 1)));
    }
    if c_prev.shape() != (u, 1) {
        return Err(Error::shape("lstm_cell_step cell", c_prev.shape(), (u, 1)));
    }
    let cache = cell_forward(layer, x_t.as_slice(), h_prev.as_slice(), c_prev.as_slice());
    Ok((Matrix::column(&cache.h), Matrix::column(&cache.c), cache))
}

/// Gradient of one cell step. Accumulates parameter gradients into `grads`
/// and `W_gᵀ da_g` into `dx`; returns `(dh_prev, dc_prev)`.
fn cell_backward(
    layer: &LstmLayerParams,
    cache: &StepCache,
    dh: &[f64],
    dc_next: &[f64],
    grads: &mut LstmLayerParams,
    dx: &mut [f64],
) -> (Vec<f64>, Vec<f64>) {
    let units = dh.len();
    let a = &cache.act;
    let mut da: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; units]);
    let mut dc_prev = vec![0.0; units];
    for j in 0..units {
        let tc = cache.tanh_c[j];
        let d_o = dh[j] * tc;
        let dc = dc_next[j] + dh[j] * a[O][j] * (1.0 - tc * tc);
        let d_i = dc * a[G][j];
        let d_g = dc * a[I][j];
        let d_f = dc * cache.c_prev[j];
        dc_prev[j] = dc * a[F][j];
        da[I][j] = d_i * a[I][j] * (1.0 - a[I][j]);
        da[F][j] = d_f * a[F][j] * (1.0 - a[F][j]);
        da[O][j] = d_o * a[O][j] * (1.0 - a[O][j]);
        da[G][j] = d_g * (1.0 - a[G][j] * a[G][j]);
    }
    let mut dh_prev = vec![0.0; units];
    for g in 0..4 {
        grads.w[g].outer_acc(&da[g], &cache.x);
        grads.u[g].outer_acc(&da[g], &cache.h_prev);
        for (b, d) in grads.b[g].as_mut_slice().iter_mut().zip(&da[g]) {
            *b += d;
        }
        layer.w[g].gemv_t_acc(&da[g], dx);
        layer.u[g].gemv_t_acc(&da[g], &mut dh_prev);
    }
    (dh_prev, dc_prev)
}

/// Recorded keep-masks (1 kept, 0 dropped), indexed `[layer][step][unit]`.
/// Decoder steps are in emission (reverse-time) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DropoutMasks {
    pub encoder: Vec<Vec<Vec<f64>>>,
    pub decoder: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Side {
    Encoder,
    Decoder,
}

enum MaskSource<'a> {
    Off,
    Sample { p: f64, rng: &'a mut Rng },
    Replay(&'a DropoutMasks),
}

impl MaskSource<'_> {
    fn new<'a>(config: &ModelConfig, training: bool, rng: &'a mut Rng) -> MaskSource<'a> {
        if training && config.dropout_p > 0.0 {
            MaskSource::Sample { p: config.dropout_p, rng }
        } else {
            MaskSource::Off
        }
    }

    fn next(&mut self, side: Side, layer: usize, step: usize, len: usize) -> Result<Option<Vec<f64>>> {
        match self {
            MaskSource::Off => Ok(None),
            MaskSource::Sample { p, rng } => Ok(Some(draw_mask(len, *p, rng))),
            MaskSource::Replay(masks) => {
                let table = match side {
                    Side::Encoder => &masks.encoder,
                    Side::Decoder => &masks.decoder,
                };
                let m = table
                    .get(layer)
                    .and_then(|l| l.get(step))
                    .ok_or_else(|| Error::Usage(format!("replayed masks missing {side:?} layer {layer} step {step}")))?;
                if m.len() != len {
                    return Err(Error::shape("replayed mask", (m.len(), 1), (len, 1)));
                }
                Ok(Some(m.clone()))
            }
        }
    }
}

fn apply_mask(h: &[f64], mask: Option<&Vec<f64>>, divisor: f64) -> Vec<f64> {
    match mask {
        None => h.to_vec(),
        Some(m) => h.iter().zip(m).map(|(&v, &k)| if k == 0.0 { 0.0 } else { v / divisor }).collect(),
    }
}

fn mask_grad(dz: &[f64], mask: Option<&Vec<f64>>, divisor: f64) -> Vec<f64> {
    match mask {
        None => dz.to_vec(),
        Some(m) => dz.iter().zip(m).map(|(&d, &k)| if k == 0.0 { 0.0 } else { d / divisor }).collect(),
    }
}

/// Per-step record of one layer: cell caches, masks and the (dropped-out)
/// outputs `z` handed to the next layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub steps: Vec<StepCache>,
    pub masks: Vec<Option<Vec<f64>>>,
    pub outputs: Vec<Vec<f64>>,
}

impl LayerTrace {
    fn with_capacity(n: usize) -> Self {
        Self { steps: Vec::with_capacity(n), masks: Vec::with_capacity(n), outputs: Vec::with_capacity(n) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderTrace {
    pub layers: Vec<LayerTrace>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderTrace {
    pub layers: Vec<LayerTrace>,
    /// First-layer input at each emission step.
    pub inputs: Vec<Vec<f64>>,
    pub teacher_forced: bool,
}

/// Final `(h, c)` of the top encoder layer; `h` has passed its dropout layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub hidden: Matrix,
    pub cell: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub encoder: EncoderTrace,
    pub decoder: DecoderTrace,
    pub latent: Latent,
    pub reconstruction: Matrix,
    /// Set when produced by a training-mode (teacher-forced) pass.
    pub training: bool,
}

impl ForwardTrace {
    /// Masks actually used, with all-ones where dropout was inactive.
    pub fn masks(&self) -> DropoutMasks {
        fn collect(layers: &[LayerTrace]) -> Vec<Vec<Vec<f64>>> {
            layers
                .iter()
                .map(|l| {
                    l.masks
                        .iter()
                        .zip(&l.outputs)
                        .map(|(m, z)| m.clone().unwrap_or_else(|| vec![1.0; z.len()]))
                        .collect()
                })
                .collect()
        }
        DropoutMasks { encoder: collect(&self.encoder.layers), decoder: collect(&self.decoder.layers) }
    }
}

fn run_encoder(
    params: &ModelParams,
    config: &ModelConfig,
    window: &Matrix,
    masks: &mut MaskSource<'_>,
) -> Result<(Latent, EncoderTrace)> {
    config.check_window(window)?;
    let l = config.window_len;
    let divisor = config.keep_divisor();
    let mut h: Vec<Vec<f64>> = config.encoder_units.iter().map(|&u| vec![0.0; u]).collect();
    let mut c = h.clone();
    let mut layers: Vec<LayerTrace> = (0..config.layers()).map(|_| LayerTrace::with_capacity(l)).collect();
    for t in 0..l {
        let mut input = window.row(t).to_vec();
        for (k, layer) in params.encoder.iter().enumerate() {
            let cache = cell_forward(layer, &input, &h[k], &c[k]);
            h[k].clone_from(&cache.h);
            c[k].clone_from(&cache.c);
            let mask = masks.next(Side::Encoder, k, t, layer.units())?;
            let z = apply_mask(&cache.h, mask.as_ref(), divisor);
            let trace = &mut layers[k];
            trace.steps.push(cache);
            trace.masks.push(mask);
            trace.outputs.push(z.clone());
            input = z;
        }
    }
    let top = layers.last().expect("at least one layer");
    let latent = Latent {
        hidden: Matrix::column(top.outputs.last().expect("window_len >= 2")),
        cell: Matrix::column(&top.steps.last().expect("window_len >= 2").c),
    };
    Ok((latent, EncoderTrace { layers }))
}

fn run_decoder(
    params: &ModelParams,
    config: &ModelConfig,
    latent: &Latent,
    window: &Matrix,
    teacher_forcing: bool,
    masks: &mut MaskSource<'_>,
) -> Result<(Matrix, DecoderTrace)> {
    config.check_window(window)?;
    let u_latent = config.latent_size();
    if latent.hidden.shape() != (u_latent, 1) {
        return Err(Error::shape("decode latent hidden", latent.hidden.shape(), (u_latent, 1)));
    }
    if latent.cell.shape() != (u_latent, 1) {
        return Err(Error::shape("decode latent cell", latent.cell.shape(), (u_latent, 1)));
    }
    let l = config.window_len;
    let n = config.input_dim;
    let divisor = config.keep_divisor();
    let units = config.decoder_units();
    let mut h: Vec<Vec<f64>> = units.iter().map(|&u| vec![0.0; u]).collect();
    let mut c = h.clone();
    h[0].copy_from_slice(latent.hidden.as_slice());
    c[0].copy_from_slice(latent.cell.as_slice());

    let mut layers: Vec<LayerTrace> = (0..units.len()).map(|_| LayerTrace::with_capacity(l)).collect();
    let mut inputs = Vec::with_capacity(l);
    let mut recon = Matrix::zeros(l, n);
    let mut prev_estimate = vec![0.0; n];
    for s in 0..l {
        let row = l - 1 - s;
        let first_input = if s == 0 {
            vec![0.0; n]
        } else if teacher_forcing {
            window.row(row + 1).to_vec()
        } else {
            prev_estimate.clone()
        };
        inputs.push(first_input.clone());
        let mut input = first_input;
        for (d, layer) in params.decoder.iter().enumerate() {
            let cache = cell_forward(layer, &input, &h[d], &c[d]);
            h[d].clone_from(&cache.h);
            c[d].clone_from(&cache.c);
            let mask = masks.next(Side::Decoder, d, s, layer.units())?;
            let z = apply_mask(&cache.h, mask.as_ref(), divisor);
            let trace = &mut layers[d];
            trace.steps.push(cache);
            trace.masks.push(mask);
            trace.outputs.push(z.clone());
            input = z;
        }
        let mut estimate = params.output_b.as_slice().to_vec();
        params.output_w.gemv_acc(&input, &mut estimate);
        recon.row_mut(row).copy_from_slice(&estimate);
        prev_estimate = estimate;
    }
    Ok((recon, DecoderTrace { layers, inputs, teacher_forced: teacher_forcing }))
}

/// Runs the encoder over a `window_len x input_dim` window.
pub fn encode(
    params: &ModelParams,
    config: &ModelConfig,
    window: &Matrix,
    training: bool,
    rng: &mut Rng,
) -> Result<(Latent, EncoderTrace)> {
    let mut masks = MaskSource::new(config, training, rng);
    run_encoder(params, config, window, &mut masks)
}

/// Reconstructs the window from `latent`. The returned matrix is in
/// chronological order even though rows are emitted last-to-first.
pub fn decode(
    params: &ModelParams,
    config: &ModelConfig,
    latent: &Latent,
    window: &Matrix,
    training: bool,
    teacher_forcing: bool,
    rng: &mut Rng,
) -> Result<(Matrix, DecoderTrace)> {
    let mut masks = MaskSource::new(config, training, rng);
    run_decoder(params, config, latent, window, teacher_forcing, &mut masks)
}

fn forward_with_source(
    params: &ModelParams,
    config: &ModelConfig,
    window: &Matrix,
    teacher_forcing: bool,
    masks: &mut MaskSource<'_>,
) -> Result<ForwardTrace> {
    let (latent, encoder) = run_encoder(params, config, window, masks)?;
    let (reconstruction, decoder) = run_decoder(params, config, &latent, window, teacher_forcing, masks)?;
    Ok(ForwardTrace { encoder, decoder, latent, reconstruction, training: teacher_forcing })
}

/// Encode then decode. Training mode samples dropout and teacher-forces the
/// decoder; the trace is returned only in training mode.
pub fn forward(
    params: &ModelParams,
    config: &ModelConfig,
    window: &Matrix,
    training: bool,
    rng: &mut Rng,
) -> Result<(Matrix, Option<ForwardTrace>)> {
    let mut masks = MaskSource::new(config, training, rng);
    let trace = forward_with_source(params, config, window, training, &mut masks)?;
    if training {
        Ok((trace.reconstruction.clone(), Some(trace)))
    } else {
        Ok((trace.reconstruction, None))
    }
}

/// Training-mode forward pass that reuses previously drawn masks.
pub fn forward_with_masks(
    params: &ModelParams,
    config: &ModelConfig,
    window: &Matrix,
    masks: &DropoutMasks,
) -> Result<(Matrix, ForwardTrace)> {
    let mut source = MaskSource::Replay(masks);
    let trace = forward_with_source(params, config, window, true, &mut source)?;
    Ok((trace.reconstruction.clone(), trace))
}

/// Inference reconstruction: no dropout, self-fed decoder, no randomness.
pub fn reconstruct(params: &ModelParams, config: &ModelConfig, window: &Matrix) -> Result<Matrix> {
    let trace = forward_with_source(params, config, window, false, &mut MaskSource::Off)?;
    Ok(trace.reconstruction)
}

/// `Σ_t ||x_t - x'_t||²` for a single window.
pub fn window_loss(window: &Matrix, reconstruction: &Matrix) -> Result<f64> {
    if window.shape() != reconstruction.shape() {
        return Err(Error::shape("window_loss", window.shape(), reconstruction.shape()));
    }
    Ok(window.as_slice().iter().zip(reconstruction.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// BPTT through one layer's recorded steps.
///
/// `dh_out[t]` is the gradient reaching `h_t` from outside the recurrence.
/// Returns the input gradients per step and the gradients of the initial state.
fn layer_backward(
    layer: &LstmLayerParams,
    trace: &LayerTrace,
    dh_out: &[Vec<f64>],
    dc_final: &[f64],
    grads: &mut LstmLayerParams,
) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let units = layer.units();
    let steps = trace.steps.len();
    let mut dx = vec![vec![0.0; layer.input_dim()]; steps];
    let mut dh_next = vec![0.0; units];
    let mut dc_next = dc_final.to_vec();
    for t in (0..steps).rev() {
        let dh: Vec<f64> = dh_out[t].iter().zip(&dh_next).map(|(a, b)| a + b).collect();
        let (dh_prev, dc_prev) = cell_backward(layer, &trace.steps[t], &dh, &dc_next, grads, &mut dx[t]);
        dh_next = dh_prev;
        dc_next = dc_prev;
    }
    (dx, dh_next, dc_next)
}

/// Gradients of `Σ_t ||x_t - x'_t||²` with respect to every parameter.
///
/// Teacher-forced decoder inputs are constants. The masks stored in the
/// trace gate the gradients exactly as they gated the activations.
pub fn backward(
    params: &ModelParams,
    config: &ModelConfig,
    trace: &ForwardTrace,
    window: &Matrix,
) -> Result<ParamGrads> {
    if !trace.training {
        return Err(Error::Usage("backward needs the trace of a training-mode forward pass".into()));
    }
    config.check_window(window)?;
    if trace.reconstruction.shape() != window.shape() {
        return Err(Error::shape("backward", trace.reconstruction.shape(), window.shape()));
    }
    let l = config.window_len;
    let divisor = config.keep_divisor();
    let mut grads = params.zeros_like();

    // Output projection; dz is indexed by emission step.
    let top_dec = trace.decoder.layers.last().expect("decoder has layers");
    let top_units = params.output_w.cols();
    let mut dz: Vec<Vec<f64>> = Vec::with_capacity(l);
    for s in 0..l {
        let row = l - 1 - s;
        let dy: Vec<f64> = trace
            .reconstruction
            .row(row)
            .iter()
            .zip(window.row(row))
            .map(|(p, x)| 2.0 * (p - x))
            .collect();
        grads.output_w.outer_acc(&dy, &top_dec.outputs[s]);
        for (b, d) in grads.output_b.as_mut_slice().iter_mut().zip(&dy) {
            *b += d;
        }
        let mut d = vec![0.0; top_units];
        params.output_w.gemv_t_acc(&dy, &mut d);
        dz.push(d);
    }

    let mut d_latent_h = Vec::new();
    let mut d_latent_c = Vec::new();
    for d in (0..params.decoder.len()).rev() {
        let layer_trace = &trace.decoder.layers[d];
        let dh_out: Vec<Vec<f64>> =
            dz.iter().zip(&layer_trace.masks).map(|(g, m)| mask_grad(g, m.as_ref(), divisor)).collect();
        let zeros = vec![0.0; params.decoder[d].units()];
        let (dx, dh0, dc0) = layer_backward(&params.decoder[d], layer_trace, &dh_out, &zeros, &mut grads.decoder[d]);
        if d == 0 {
            d_latent_h = dh0;
            d_latent_c = dc0;
        } else {
            dz = dx;
        }
    }

    // Latent handoff: only the top encoder layer's last output and cell feed the decoder.
    let h_layers = params.encoder.len();
    let mut dz: Vec<Vec<f64>> = vec![vec![0.0; config.latent_size()]; l];
    dz[l - 1] = d_latent_h;
    let mut dc_final = d_latent_c;
    for k in (0..h_layers).rev() {
        let layer_trace = &trace.encoder.layers[k];
        let dh_out: Vec<Vec<f64>> =
            dz.iter().zip(&layer_trace.masks).map(|(g, m)| mask_grad(g, m.as_ref(), divisor)).collect();
        let (dx, _, _) = layer_backward(&params.encoder[k], layer_trace, &dh_out, &dc_final, &mut grads.encoder[k]);
        dz = dx;
        dc_final = vec![0.0; if k > 0 { params.encoder[k - 1].units() } else { 0 }];
    }
    Ok(grads)
}

/// Loss and gradients of one window under freshly sampled dropout masks.
pub fn loss_and_grads(
    params: &ModelParams,
    config: &ModelConfig,
    window: &Matrix,
    rng: &mut Rng,
) -> Result<(f64, ParamGrads)> {
    let (recon, trace) = forward(params, config, window, true, rng)?;
    let trace = trace.expect("training forward keeps its trace");
    let loss = window_loss(window, &recon)?;
    let grads = backward(params, config, &trace, window)?;
    Ok((loss, grads))
}
