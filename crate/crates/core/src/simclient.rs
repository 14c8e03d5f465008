//! Simulated heterogeneous clients: local SGD plus a linear epoch-time model.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dropout::SubModel;
use crate::error::{FluidError, Result};
use crate::nn::{Matrix, Model};
use crate::rng::SimRng;

pub const DEFAULT_NOISE_PCT: f64 = 0.05;

/// Background load slowing a client while `start <= progress < end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadWindow {
    pub start: f64,
    pub end: f64,
    pub slowdown: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSpec {
    pub id: usize,
    /// Seconds per local epoch on the full model.
    pub base_epoch_time: f64,
    pub noise_pct: f64,
    pub load_schedule: Vec<LoadWindow>,
}

impl ClientSpec {
    pub fn new(id: usize, base_epoch_time: f64) -> Self {
        ClientSpec {
            id,
            base_epoch_time,
            noise_pct: DEFAULT_NOISE_PCT,
            load_schedule: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_epoch_time > 0.0 && self.base_epoch_time.is_finite()) {
            return Err(FluidError::Config(format!(
                "client {}: base epoch time {} must be > 0",
                self.id, self.base_epoch_time
            )));
        }
        if !(0.0..0.1).contains(&self.noise_pct) {
            return Err(FluidError::Config(format!(
                "client {}: noise {} must lie in [0, 0.1)",
                self.id, self.noise_pct
            )));
        }
        for w in &self.load_schedule {
            if !(w.slowdown >= 1.0) || !(w.start <= w.end) {
                return Err(FluidError::Config(format!(
                    "client {}: load window {w:?} needs start <= end and slowdown >= 1",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// Product of the slowdowns of all windows active at `progress`.
    pub fn active_slowdown(&self, progress: f64) -> f64 {
        self.load_schedule
            .iter()
            .filter(|w| w.start <= progress && progress < w.end)
            .map(|w| w.slowdown)
            .product()
    }
}

/// Simulated seconds for one local epoch on a sub-model of rate `rate`:
/// `base * rate * slowdown * (1 + u)` with `u ~ U(-noise, noise)`.
pub fn simulate_epoch_time(spec: &ClientSpec, rate: f64, progress: f64, rng: &mut SimRng) -> f64 {
    let noise = if spec.noise_pct > 0.0 {
        rng.random_range(-spec.noise_pct..=spec.noise_pct)
    } else {
        0.0
    };
    spec.base_epoch_time * rate * spec.active_slowdown(progress) * (1.0 + noise)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

/// Mini-batch SGD over `(features, labels)`, reshuffling every epoch.
/// Returns the mean training loss of the last epoch.
pub fn train_sgd(
    model: &mut Model,
    features: &Matrix,
    labels: &[usize],
    params: TrainParams,
    rng: &mut SimRng,
) -> Result<f64> {
    if features.rows() == 0 {
        return Err(FluidError::Data("empty training slice".into()));
    }
    if params.batch == 0 {
        return Err(FluidError::Config("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..features.rows()).collect();
    let mut last_loss = 0.0;
    for _ in 0..params.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(params.batch) {
            let x = features.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (grads, loss) = model.backward(&x, &y)?;
            model.sgd_step(&grads, params.lr)?;
            total += loss * chunk.len() as f64;
        }
        last_loss = total / features.rows() as f64;
    }
    Ok(last_loss)
}

/// What a client sends back after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub id: usize,
    pub epoch_time: f64,
    pub update: SubModel,
    pub train_count: usize,
    pub train_loss: f64,
}

/// What a client reports after evaluating the global model locally.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub id: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub eval_count: usize,
}

/// A client's local data.
#[derive(Debug, Clone)]
pub struct LocalData {
    pub train_x: Matrix,
    pub train_y: Vec<usize>,
    pub test_x: Matrix,
    pub test_y: Vec<usize>,
}

/// Trains `submodel` on the client's training slice and times it.
pub fn local_train(
    spec: &ClientSpec,
    mut submodel: SubModel,
    data: &LocalData,
    params: TrainParams,
    progress: f64,
    train_rng: &mut SimRng,
    time_rng: &mut SimRng,
) -> Result<ClientReport> {
    if data.train_y.is_empty() {
        return Err(FluidError::Data(format!("client {} has no training data", spec.id)));
    }
    let rate = submodel.mask.rate;
    let train_loss = train_sgd(&mut submodel.model, &data.train_x, &data.train_y, params, train_rng)?;
    let epoch_time = (0..params.epochs.max(1))
        .map(|_| simulate_epoch_time(spec, rate, progress, time_rng))
        .sum();
    Ok(ClientReport {
        id: spec.id,
        epoch_time,
        update: submodel,
        train_count: data.train_y.len(),
        train_loss,
    })
}

/// Evaluates `model` on the client's held-out slice.
pub fn local_eval(id: usize, model: &Model, data: &LocalData) -> Result<EvalReport> {
    if data.test_y.is_empty() {
        return Ok(EvalReport {
            id,
            accuracy: 0.0,
            loss: 0.0,
            eval_count: 0,
        });
    }
    let (accuracy, loss) = model.evaluate(&data.test_x, &data.test_y)?;
    Ok(EvalReport {
        id,
        accuracy,
        loss,
        eval_count: data.test_y.len(),
    })
}
