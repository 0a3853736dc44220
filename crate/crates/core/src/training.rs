//! Minibatch Adam training with early stopping on a chronological validation tail.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lstm::{loss_and_grads, reconstruct, window_loss, ModelConfig, ModelParams, ParamGrads};
use crate::tensor::{Matrix, Rng};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Fewest windows `fit` accepts.
pub const MIN_WINDOWS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 50,
            patience: 3,
            min_delta: 1e-5,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, max_epochs and patience must be positive".into()));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::Config(format!("min_delta must be non-negative, got {}", self.min_delta)));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation_fraction must be in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub epochs_run: usize,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
}

impl TrainHistory {
    /// Writes `epoch,train_loss,validation_loss` rows, epochs 1-based.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,train_loss,validation_loss")?;
        for (k, (t, v)) in self.train_loss.iter().zip(&self.validation_loss).enumerate() {
            writeln!(out, "{},{t},{v}", k + 1)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }
}

/// Mean over windows of `Σ_t ||x_t - x'_t||²`.
pub fn reconstruction_loss(windows: &[Matrix], reconstructions: &[Matrix]) -> Result<f64> {
    if windows.len() != reconstructions.len() {
        return Err(Error::shape("reconstruction_loss batch", (windows.len(), 0), (reconstructions.len(), 0)));
    }
    if windows.is_empty() {
        return Err(Error::Data("reconstruction_loss needs at least one window".into()));
    }
    let mut total = 0.0;
    for (w, r) in windows.iter().zip(reconstructions) {
        total += window_loss(w, r)?;
    }
    Ok(total / windows.len() as f64)
}

/// One bias-corrected Adam update over every parameter tensor.
pub fn adam_step(params: &mut ModelParams, grads: &ParamGrads, state: &mut AdamState, lr: f64) -> Result<()> {
    params.check_shapes(grads, "adam_step grads")?;
    params.check_shapes(&state.m, "adam_step state")?;
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    let grads = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs) {
        let slices = p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m.as_mut_slice()).zip(v.as_mut_slice());
        for (((p, &g), m), v) in slices {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
    }
    Ok(())
}

/// Mean inference-mode loss over a set of windows.
pub fn evaluate_loss(params: &ModelParams, config: &ModelConfig, windows: &[Matrix]) -> Result<f64> {
    let losses: Vec<f64> = windows
        .par_iter()
        .map(|w| reconstruct(params, config, w).and_then(|r| window_loss(w, &r)))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / windows.len() as f64)
}

/// Size of the chronological validation tail for `n` windows.
pub fn validation_len(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).ceil() as usize).clamp(1, n - 1)
}

/// Trains `params` on `windows` and returns the best-validation parameters.
///
/// The last `validation_fraction` of the windows (in the given order) is held
/// out. Each epoch reshuffles the training part; every window's dropout masks
/// come from a generator keyed by `(config.seed, epoch, position)`, so results
/// do not depend on thread scheduling.
pub fn fit(
    mut params: ModelParams,
    config: &ModelConfig,
    windows: &[Matrix],
    tcfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    config.validate()?;
    tcfg.validate()?;
    if windows.len() < MIN_WINDOWS {
        return Err(Error::Data(format!("need at least {MIN_WINDOWS} windows to train, got {}", windows.len())));
    }
    let n_val = validation_len(windows.len(), tcfg.validation_fraction);
    let (train, validation) = windows.split_at(windows.len() - n_val);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = Rng::derive(&[tcfg.seed, 0x5EED]);
    let mut adam = AdamState::new(&params);
    let mut history = TrainHistory::default();
    let mut best_params = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut stale = 0usize;

    for epoch in 1..=tcfg.max_epochs {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for (batch_index, batch) in order.chunks(tcfg.batch_size).enumerate() {
            let base = batch_index * tcfg.batch_size;
            let results: Vec<(f64, ParamGrads)> = batch
                .par_iter()
                .enumerate()
                .map(|(offset, &i)| {
                    let mut rng = Rng::derive(&[config.seed, epoch as u64, (base + offset) as u64]);
                    loss_and_grads(&params, config, &train[i], &mut rng)
                })
                .collect::<Result<_>>()?;
            let mut iter = results.into_iter();
            let (first_loss, mut grads) = iter.next().expect("non-empty batch");
            let mut batch_loss = first_loss;
            for (loss, g) in iter {
                batch_loss += loss;
                grads.add_assign(&g)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            epoch_loss += batch_loss;
            grads.scale_assign(1.0 / batch.len() as f64);
            adam_step(&mut params, &grads, &mut adam, tcfg.learning_rate)?;
        }
        let train_loss = epoch_loss / train.len() as f64;
        let val_loss = evaluate_loss(&params, config, validation)?;
        if !train_loss.is_finite() || !val_loss.is_finite() || !params.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        history.train_loss.push(train_loss);
        history.validation_loss.push(val_loss);
        history.epochs_run = epoch;

        if val_loss < best_loss - tcfg.min_delta {
            best_loss = val_loss;
            best_params.clone_from(&params);
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= tcfg.patience {
                break;
            }
        }
    }
    if history.best_epoch == 0 {
        // Only reachable when no epoch beat +inf, which the finiteness check rules out.
        return Err(Error::Divergence { epoch: history.epochs_run });
    }
    Ok((best_params, history))
}
