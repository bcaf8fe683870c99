//! Full-model SGD training of fixtures.

use postprune::autodiff::Tape;
use postprune::optim::sgd_step;
use postprune::rng::{rng, sub_seed};
use postprune::tensor::BnMode;
use postprune::{ModelGraph, Tensor};
use rand::seq::SliceRandom;

use crate::data::{Dataset, Split, Targets};
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 32,
            lr: 0.02,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Loss of `out` against the split's targets, recorded on `tape`.
pub(crate) fn loss_on_tape(
    tape: &mut Tape<f64>,
    out: postprune::autodiff::Var,
    targets: &Targets,
) -> Result<postprune::autodiff::Var> {
    let r = match targets {
        Targets::Labels(l) => tape.softmax_xent(out, l),
        Targets::Images(t) => {
            let shape = tape.value(out).shape().to_vec();
            let t = t
                .reshape(&shape)
                .map_err(|e| HarnessError::Data(e.to_string()))?;
            tape.mse(out, &t)
        }
    };
    r.map_err(|e| HarnessError::Data(e.to_string()))
}

/// Trains every parameter in place; returns the mean loss of the last epoch.
/// The trained weights are rounded to single precision, the storage format.
pub fn train(graph: &mut ModelGraph, data: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(HarnessError::Usage(
            "epochs and batch size must be positive".into(),
        ));
    }
    let n = data.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffler = rng(sub_seed(cfg.seed, "train-shuffle"));
    let mut velocity: Vec<Option<Tensor>> = Vec::new();
    let mut last = f64::NAN;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffler);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let split: Split = data.train.gather(batch);
            let mut tape = Tape::new();
            let x = tape.constant(split.inputs.clone());
            let (trace, updates) = graph.trace_full(&mut tape, x, |_, _| true, BnMode::Train)?;
            let loss = loss_on_tape(&mut tape, trace.outputs[graph.exit()], &split.targets)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(HarnessError::Numerical(format!(
                    "training diverged in epoch {epoch}"
                )));
            }
            total += lv;
            batches += 1;
            let mut grads = tape
                .backward(loss)
                .map_err(|e| HarnessError::Data(e.to_string()))?;
            if velocity.is_empty() {
                velocity = vec![None; trace.params.len()];
            }
            for (slot_idx, (id, slot, var)) in trace.params.iter().enumerate() {
                let g = grads.take(*var).expect("gradient for parameter");
                let p = graph
                    .layer_mut(id)
                    .and_then(|l| l.param_mut(*slot))
                    .expect("parameter");
                let v = velocity[slot_idx].get_or_insert_with(|| Tensor::zeros(p.shape()));
                sgd_step(p, &g, v, cfg.lr, cfg.momentum, None)
                    .map_err(|e| HarnessError::Data(e.to_string()))?;
            }
            graph.apply_bn_updates(updates);
        }
        last = total / batches as f64;
        log::debug!("epoch {epoch}: loss {last:.5}");
    }
    *graph = graph.cast::<f32>().cast();
    Ok(last)
}
