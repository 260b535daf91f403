//! MAE, RMSE and masked MAPE in de-normalised units.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{NormStats, WindowSet};
use crate::error::{Error, Result};
use crate::model::{Forecaster, ModelParams};
use crate::tensor::Tensor;
use crate::train::EVAL_BATCH;

/// Targets with smaller magnitude are left out of MAPE.
pub const MAPE_MASK_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when every target was masked.
    pub mape_percent: Option<f64>,
    pub count: usize,
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mae={}", self.mae)?;
        match self.mape_percent {
            Some(m) => writeln!(f, "mape_percent={m}")?,
            None => writeln!(f, "mape_percent=undefined")?,
        }
        write!(f, "rmse={}", self.rmse)
    }
}

/// Running sums behind [`Metrics`].
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    abs: f64,
    sq: f64,
    pct: f64,
    count: usize,
    masked_count: usize,
}

impl MetricAccumulator {
    pub fn push(&mut self, prediction: f64, truth: f64) {
        let e = prediction - truth;
        self.abs += e.abs();
        self.sq += e * e;
        self.count += 1;
        if truth.abs() >= MAPE_MASK_EPSILON {
            self.pct += (e / truth).abs();
            self.masked_count += 1;
        }
    }

    pub fn finish(&self) -> Result<Metrics> {
        if self.count == 0 {
            return Err(Error::Data("no predictions to score".into()));
        }
        let n = self.count as f64;
        let mae = self.abs / n;
        let rmse = (self.sq / n).sqrt();
        let mape_percent = (self.masked_count > 0).then(|| 100.0 * self.pct / self.masked_count as f64);
        Ok(Metrics {
            mae,
            rmse,
            mape_percent,
            count: self.count,
        })
    }
}

pub fn compute_metrics(predictions: &[f64], truth: &[f64]) -> Result<Metrics> {
    if predictions.len() != truth.len() {
        return Err(Error::shape("metrics", &[predictions.len()], &[truth.len()]));
    }
    let mut acc = MetricAccumulator::default();
    for (&p, &t) in predictions.iter().zip(truth) {
        acc.push(p, t);
    }
    acc.finish()
}

/// Scores pooled over all horizons, plus one entry per horizon step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub overall: Metrics,
    pub per_horizon: Vec<Metrics>,
}

/// Accumulates `B × N × T` normalised predictions against targets.
struct HorizonScorer {
    overall: MetricAccumulator,
    per_horizon: Vec<MetricAccumulator>,
}

impl HorizonScorer {
    fn new(window: usize) -> Self {
        HorizonScorer {
            overall: MetricAccumulator::default(),
            per_horizon: vec![MetricAccumulator::default(); window],
        }
    }

    fn push(&mut self, pred: &Tensor, target: &Tensor, stats: &NormStats) {
        let t = self.per_horizon.len();
        for (i, (&p, &y)) in pred.data().iter().zip(target.data()).enumerate() {
            let (p, y) = (stats.denormalize(p), stats.denormalize(y));
            self.overall.push(p, y);
            self.per_horizon[i % t].push(p, y);
        }
    }

    fn finish(self) -> Result<Evaluation> {
        Ok(Evaluation {
            overall: self.overall.finish()?,
            per_horizon: self.per_horizon.iter().map(|a| a.finish()).collect::<Result<_>>()?,
        })
    }
}

/// Scores the model over every window, in window order.
pub fn evaluate(model: &Forecaster, params: &ModelParams, windows: &WindowSet, stats: &NormStats) -> Result<Evaluation> {
    evaluate_order(model, params, windows, stats, &(0..windows.len()).collect::<Vec<_>>())
}

/// Scores the model over the listed windows, in the given order.
pub fn evaluate_order(
    model: &Forecaster,
    params: &ModelParams,
    windows: &WindowSet,
    stats: &NormStats,
    order: &[usize],
) -> Result<Evaluation> {
    if order.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty window set".into()));
    }
    let mut scorer = HorizonScorer::new(windows.window());
    for chunk in order.chunks(EVAL_BATCH) {
        let (x, y) = windows.batch(chunk);
        let pred = model.predict(params, &x)?;
        scorer.push(&pred, &y, stats);
    }
    let eval = scorer.finish()?;
    debug_assert!(eval.overall.rmse + 1e-12 >= eval.overall.mae);
    Ok(eval)
}

/// Scores the forecast that repeats each window's last observed reading.
pub fn evaluate_last_observation(windows: &WindowSet, stats: &NormStats) -> Result<Evaluation> {
    if windows.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty window set".into()));
    }
    let order: Vec<usize> = (0..windows.len()).collect();
    let mut scorer = HorizonScorer::new(windows.window());
    for chunk in order.chunks(EVAL_BATCH) {
        let (_, y) = windows.batch(chunk);
        scorer.push(&windows.last_observation(chunk), &y, stats);
    }
    scorer.finish()
}

/// One-step-ahead forecasts for one sensor, aligned with its readings:
/// `(absolute step, truth, forecast)` where the forecast is missing for steps
/// no window predicts at horizon 1.
pub fn one_step_curve(
    model: &Forecaster,
    params: &ModelParams,
    windows: &WindowSet,
    stats: &NormStats,
    node: usize,
) -> Result<Vec<(usize, f64, Option<f64>)>> {
    if node >= windows.num_nodes() {
        return Err(Error::Config(format!(
            "node {node} does not exist; the dataset has {} sensors",
            windows.num_nodes()
        )));
    }
    let part = windows.partition();
    let t = windows.window();
    let mut forecast = vec![None; part.num_steps()];
    let order: Vec<usize> = (0..windows.len()).collect();
    for chunk in order.chunks(EVAL_BATCH) {
        let (x, _) = windows.batch(chunk);
        let pred = model.predict(params, &x)?;
        for (b, &i) in chunk.iter().enumerate() {
            forecast[i + t] = Some(stats.denormalize(pred.get(&[b, node, 0])));
        }
    }
    Ok((0..part.num_steps())
        .map(|s| (windows.offset() + s, stats.denormalize(part.value(s, node)), forecast[s]))
        .collect())
}
