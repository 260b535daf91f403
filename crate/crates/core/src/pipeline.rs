//! Train, then score the restored best parameters on validation and test.

use crate::data::Dataset;
use crate::error::Result;
use crate::metrics::{evaluate, evaluate_last_observation, Evaluation};
use crate::model::Forecaster;
use crate::train::{train_loop, TrainConfig, TrainOutcome};

#[derive(Debug, Clone)]
pub struct RunReport {
    pub outcome: TrainOutcome,
    pub val: Evaluation,
    pub test: Evaluation,
    /// Last-observation forecast on the test windows.
    pub baseline_test: Evaluation,
}

pub fn train_and_evaluate(model: &Forecaster, data: &Dataset, cfg: &TrainConfig) -> Result<RunReport> {
    let outcome = train_loop(model, model.init_params(), &data.train, &data.val, cfg)?;
    let val = evaluate(model, &outcome.params, &data.val, &data.stats)?;
    let test = evaluate(model, &outcome.params, &data.test, &data.stats)?;
    let baseline_test = evaluate_last_observation(&data.test, &data.stats)?;
    Ok(RunReport {
        outcome,
        val,
        test,
        baseline_test,
    })
}
