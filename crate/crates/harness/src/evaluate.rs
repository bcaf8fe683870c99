//! Scoring a model on a dataset split.

use postprune::metrics::TaskScore;
use postprune::tensor;
use postprune::ModelGraph;

use crate::data::{Split, Targets, Task};
use crate::error::{HarnessError, Result};

/// Top-1 accuracy (classification) or mean squared reconstruction error
/// (denoising) on `split`.
pub fn evaluate(graph: &ModelGraph, split: &Split, task: Task) -> Result<TaskScore> {
    let pred = graph.predict(&split.inputs)?;
    let n = split.len();
    match (&split.targets, task) {
        (Targets::Labels(labels), Task::Cls) => {
            if pred.rank() != 2 || pred.shape()[0] != n {
                return Err(HarnessError::Data(format!(
                    "classifier output {:?} for {n} samples",
                    pred.shape()
                )));
            }
            let c = pred.shape()[1];
            let correct = pred
                .data()
                .chunks(c)
                .zip(labels)
                .filter(|(row, &y)| {
                    // first maximum wins
                    let best = row
                        .iter()
                        .enumerate()
                        .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
                    best == y
                })
                .count();
            Ok(TaskScore::higher(correct as f64 / n as f64)?)
        }
        (Targets::Images(clean), Task::Den) => {
            let target = clean
                .reshape(pred.shape())
                .map_err(|e| HarnessError::Data(e.to_string()))?;
            let err = tensor::mse(&pred, &target).map_err(|e| HarnessError::Data(e.to_string()))?;
            if !err.is_finite() {
                return Err(HarnessError::Numerical("non-finite denoising error".into()));
            }
            TaskScore::lower(err).map_err(|_| {
                HarnessError::Data(
                    "denoising error is exactly 0; lower-is-better scores must be positive".into(),
                )
            })
        }
        _ => Err(HarnessError::Usage(format!(
            "dataset targets do not match task {task}"
        ))),
    }
}
