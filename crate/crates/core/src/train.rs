//! AdamW, early stopping and the mini-batch training loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowSet;
use crate::error::{Error, Result};
use crate::model::{Forecaster, ModelParams};
use crate::tensor::Tensor;

/// Windows per forward pass when only losses or predictions are needed.
pub const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Drives mini-batch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 16,
            max_epochs: 200,
            patience: 15,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config(format!(
                "batch size ({}), epochs ({}) and patience ({}) must all be positive",
                self.batch_size, self.max_epochs, self.patience
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "eps must be positive and weight decay non-negative, got {} and {}",
                self.eps, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// First and second moment estimates for every parameter scalar.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of `params` in place. Rejects non-finite gradients before
    /// touching anything.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw_step", p.shape(), g.shape()));
            }
            if let Some(j) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in parameter tensor {i} at element {j}"
                )));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= self.lr * self.weight_decay * *w;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Patience counter over a monitored loss; lower is better.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records `value` for `epoch`; returns true when it is a new best.
    pub fn update(&mut self, epoch: usize, value: f64) -> bool {
        if value < self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    Diverged,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    /// 1-based; 0 when divergence struck before any epoch finished.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop: StopReason,
}

/// Mean Huber loss over every window of `windows`.
pub fn dataset_loss(model: &Forecaster, params: &ModelParams, windows: &WindowSet) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Data("cannot compute a loss over an empty window set".into()));
    }
    let indices: Vec<usize> = (0..windows.len()).collect();
    let mut total = 0.0;
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, y) = windows.batch(chunk);
        total += model.loss(params, &x, &y)? * chunk.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

/// Shuffled mini-batch AdamW on the Huber loss, monitored by validation loss.
pub fn train_loop(
    model: &Forecaster,
    init: ModelParams,
    train: &WindowSet,
    val: &WindowSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.check_params(&init)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "training needs windows in both partitions (train {}, validation {})",
            train.len(),
            val.len()
        )));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg);
    let mut params = init;
    let mut best = params.clone();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stop = StopReason::MaxEpochs;

    'epochs: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk);
            let (loss, grads) = model.loss_and_gradients(&params, &x, &y)?;
            if !loss.is_finite() {
                log::error!("training loss became {loss} in epoch {epoch}; keeping the best parameters so far");
                stop = StopReason::Diverged;
                break 'epochs;
            }
            match opt.step(&mut params.tensors_mut(), &grads) {
                Ok(()) => {}
                Err(Error::Numerical(msg)) => {
                    log::error!("{msg} in epoch {epoch}; keeping the best parameters so far");
                    stop = StopReason::Diverged;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            sum += loss * chunk.len() as f64;
        }
        let train_loss = sum / train.len() as f64;
        let val_loss = dataset_loss(model, &params, val)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: cfg.lr,
            wall_ms: started.elapsed().as_millis() as u64,
        });
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        if !val_loss.is_finite() {
            stop = StopReason::Diverged;
            break;
        }
        if stopper.update(epoch, val_loss) {
            best = params.clone();
        }
        if stopper.should_stop() {
            stop = StopReason::Patience;
            break;
        }
    }

    Ok(TrainOutcome {
        params: best,
        history,
        best_epoch: stopper.best_epoch(),
        best_val_loss: stopper.best(),
        stop,
    })
}
