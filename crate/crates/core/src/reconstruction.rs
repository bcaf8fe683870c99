//! Reconstruction: error correction followed by unit-by-unit optimization of
//! the sparse weights against the dense model's unit outputs.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::allocation::SparsityMask;
use crate::autodiff::Tape;
use crate::graph::{
    partition_units, Granularity, GraphError, Layer, ModelGraph, ParamSlot, ReconstructionUnit,
    GRAPH_INPUT,
};
use crate::optim::sgd_step;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{self, BnMode, Tensor, TensorError};

/// Small constant in the denominator of the correction scale.
pub const EC_EPS: f64 = 1e-12;
pub const DEFAULT_CALIBRATION_SIZE: usize = 1024;
pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_ITERATIONS: usize = 20_000;
pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, thiserror::Error)]
pub enum ReconError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dense and sparse models differ: {0}")]
    Mismatch(String),
    #[error("empty calibration input")]
    EmptyInput,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ReconError>;

/// Where a unit's inputs come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InputMode {
    /// Output of the already reconstructed sparse prefix.
    Sparse,
    /// Output of the dense model.
    Dense,
}

impl InputMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::Sparse => "sparse",
            InputMode::Dense => "dense",
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InputMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sparse" => Ok(InputMode::Sparse),
            "dense" => Ok(InputMode::Dense),
            other => Err(format!(
                "unknown input mode {other:?} (expected sparse or dense)"
            )),
        }
    }
}

/// Grouping of weights for the mean/std statistics of error correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StatsScope {
    /// One group per output channel (row of the weight).
    #[default]
    PerChannel,
    /// The whole weight tensor.
    PerTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconConfig {
    pub granularity: Granularity,
    pub input_mode: InputMode,
    pub error_correction: bool,
    pub stats_scope: StatsScope,
    pub lr: f64,
    pub momentum: f64,
    /// Optimizer steps (batches) per unit.
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            granularity: Granularity::BlockWise,
            input_mode: InputMode::Sparse,
            error_correction: false,
            stats_scope: StatsScope::PerChannel,
            lr: DEFAULT_LR,
            momentum: DEFAULT_MOMENTUM,
            iterations: DEFAULT_ITERATIONS,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ReconError::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ReconError::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.iterations == 0 {
            return Err(ReconError::Config("iterations must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ReconError::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }

    /// Short tag naming the technique combination, e.g. `block-sparse-noec`.
    pub fn tag(&self) -> String {
        format!(
            "{}-{}-{}",
            self.granularity,
            self.input_mode,
            if self.error_correction { "ec" } else { "noec" }
        )
    }
}

/// Unlabeled inputs driving correction and reconstruction.
#[derive(Debug, Clone)]
pub struct CalibrationSet<T> {
    inputs: Tensor<T>,
}

impl<T: Scalar> CalibrationSet<T> {
    /// `inputs` is `[N × sample shape]`.
    pub fn new(inputs: Tensor<T>) -> Result<Self> {
        if inputs.rank() < 2 {
            return Err(ReconError::EmptyInput);
        }
        Ok(Self { inputs })
    }

    /// Random subset of `pool` rows, without replacement.
    pub fn sample(pool: &Tensor<T>, count: usize, seed: u64) -> Result<Self> {
        let idx = rng::sample_indices(pool.shape()[0], count, seed);
        if idx.is_empty() {
            return Err(ReconError::EmptyInput);
        }
        Self::new(pool.gather_batch(&idx))
    }

    pub fn inputs(&self) -> &Tensor<T> {
        &self.inputs
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---------------------------------------------------------------------------
// Error correction.

/// Result of correcting one layer.
#[derive(Debug, Clone)]
pub struct Corrected<T> {
    pub layer: Layer<T>,
    /// Corrected weight before re-applying the mask.
    pub unmasked_weight: Tensor<T>,
    /// Scale per statistics group.
    pub scales: Vec<T>,
}

fn mean_std<T: Scalar>(xs: &[T]) -> (T, T) {
    let n = T::from_usize_lossy(xs.len());
    let mean = xs.iter().copied().sum::<T>() / n;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    (mean, var.sqrt())
}

/// Per-output-channel means of a `[N×C]` or `[N×C×H×W]` activation.
pub fn channel_means<T: Scalar>(t: &Tensor<T>) -> Result<Vec<T>> {
    match t.rank() {
        2 => {
            let (n, c) = (t.shape()[0], t.shape()[1]);
            let mut m = vec![T::zero(); c];
            for row in t.data().chunks(c) {
                for (a, &v) in m.iter_mut().zip(row) {
                    *a += v;
                }
            }
            let n = T::from_usize_lossy(n);
            Ok(m.into_iter().map(|v| v / n).collect())
        }
        4 => Ok(tensor::channel_stats(t)?.0),
        _ => Err(ReconError::Tensor(TensorError::ShapeMismatch {
            op: "channel_means",
            detail: format!("unsupported activation shape {:?}", t.shape()),
        })),
    }
}

/// Matches the sparse weights' mean and standard deviation to the dense
/// weights' per group, re-applies the mask, then shifts the bias so that the
/// per-channel output means on `dense_inputs` agree with the dense layer.
pub fn error_correct_layer<T: Scalar>(
    dense: &Layer<T>,
    sparse: &Layer<T>,
    mask: &[bool],
    dense_inputs: &Tensor<T>,
    scope: StatsScope,
) -> Result<Corrected<T>> {
    let (Some(wd), Some(ws), Some(bd)) = (dense.weight(), sparse.weight(), dense.bias()) else {
        return Err(ReconError::Mismatch(
            "error correction needs dense or conv layers".into(),
        ));
    };
    if dense.kind() != sparse.kind() || wd.shape() != ws.shape() || mask.len() != ws.numel() {
        return Err(ReconError::Mismatch(format!(
            "dense {:?}, sparse {:?}, mask of {}",
            wd.shape(),
            ws.shape(),
            mask.len()
        )));
    }
    if dense_inputs.shape()[0] == 0 {
        return Err(ReconError::EmptyInput);
    }
    let group = match scope {
        StatsScope::PerChannel => ws.numel() / ws.shape()[0],
        StatsScope::PerTensor => ws.numel(),
    };
    let eps = T::lit(EC_EPS);
    let mut corrected = ws.clone();
    let mut scales = Vec::new();
    for (out, (gd, gs)) in corrected
        .data_mut()
        .chunks_mut(group)
        .zip(wd.data().chunks(group).zip(ws.data().chunks(group)))
    {
        let (mean_d, std_d) = mean_std(gd);
        let (_, std_s) = mean_std(gs);
        let lambda = std_d / (std_s + eps);
        let scaled: Vec<T> = gs.iter().map(|&w| lambda * w).collect();
        let (mean_scaled, _) = mean_std(&scaled);
        for (o, &v) in out.iter_mut().zip(&scaled) {
            *o = v + mean_d - mean_scaled;
        }
        scales.push(lambda);
    }
    let unmasked_weight = corrected.clone();
    for (w, &k) in corrected.data_mut().iter_mut().zip(mask) {
        if !k {
            *w = T::zero();
        }
    }
    let md = channel_means(&dense.apply_weight_only(wd, dense_inputs)?)?;
    let ms = channel_means(&dense.apply_weight_only(&corrected, dense_inputs)?)?;
    let bias = Tensor::from_fn(bd.shape(), |c| bd.data()[c] + md[c] - ms[c]);

    let mut layer = sparse.clone();
    *layer.weight_mut().expect("has weight") = corrected;
    *layer.bias_mut().expect("has bias") = bias;
    Ok(Corrected {
        layer,
        unmasked_weight,
        scales,
    })
}

// ---------------------------------------------------------------------------
// Unit optimization.

/// Outcome of optimizing one unit.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitReport {
    pub output: String,
    pub members: Vec<String>,
    /// MSE to the dense targets over the whole calibration set.
    pub initial_mse: f64,
    pub final_mse: f64,
    /// Mini-batch loss at every iteration.
    pub loss_trace: Vec<f64>,
    /// Set when optimization was abandoned and the weights restored.
    pub aborted: Option<String>,
}

/// Evaluates a unit's output from full input activations without recording.
pub fn unit_forward<T: Scalar>(
    graph: &ModelGraph<T>,
    unit: &ReconstructionUnit,
    inputs: &HashMap<String, Tensor<T>>,
) -> Result<Tensor<T>> {
    let mut acts: HashMap<&str, Tensor<T>> = HashMap::new();
    for m in &unit.members {
        let node = graph
            .node(m)
            .ok_or_else(|| GraphError::UnknownNode(m.clone()))?;
        let ins: Vec<&Tensor<T>> = node
            .inputs
            .iter()
            .map(|p| acts.get(p.as_str()).or_else(|| inputs.get(p)))
            .collect::<Option<_>>()
            .ok_or_else(|| GraphError::UnknownInput {
                node: m.clone(),
                input: node.inputs.join(","),
            })?;
        let y = node.layer.apply(&ins).map_err(|source| GraphError::Shape {
            node: m.clone(),
            source,
        })?;
        acts.insert(m, y);
    }
    Ok(acts
        .remove(unit.output.as_str())
        .expect("unit output computed"))
}

/// Optimizes the prunable members of `unit` inside `graph` so the unit output
/// on `inputs` approaches `targets`. Masked weights stay exactly zero.
pub fn reconstruct_unit<T: Scalar>(
    graph: &mut ModelGraph<T>,
    unit: &ReconstructionUnit,
    mask: &SparsityMask,
    inputs: &HashMap<String, Tensor<T>>,
    targets: &Tensor<T>,
    cfg: &ReconConfig,
    seed: u64,
) -> Result<UnitReport> {
    cfg.validate()?;
    let n = targets.shape()[0];
    if n == 0 {
        return Err(ReconError::EmptyInput);
    }
    for id in &unit.inputs {
        let t = inputs
            .get(id)
            .ok_or_else(|| ReconError::Mismatch(format!("missing unit input {id:?}")))?;
        if t.shape()[0] != n {
            return Err(ReconError::Mismatch(format!(
                "input {id:?} has {} rows, targets {}",
                t.shape()[0],
                n
            )));
        }
    }
    let trainable: Vec<String> = unit
        .prunable_members(graph)
        .into_iter()
        .map(str::to_string)
        .collect();
    for id in &trainable {
        let count = graph
            .node(id)
            .and_then(|n| n.layer.weight())
            .map(Tensor::numel);
        if mask.get(id).map(<[bool]>::len) != count {
            return Err(ReconError::Mismatch(format!(
                "mask for {id:?} does not match its weight"
            )));
        }
    }

    let full_mse = |g: &ModelGraph<T>| -> Result<f64> {
        Ok(tensor::mse(&unit_forward(g, unit, inputs)?, targets)?.to_f64_lossy())
    };
    let initial_mse = full_mse(graph)?;
    let mut report = UnitReport {
        output: unit.output.clone(),
        members: unit.members.clone(),
        initial_mse,
        final_mse: initial_mse,
        loss_trace: Vec::new(),
        aborted: None,
    };
    if trainable.is_empty() || initial_mse == 0.0 {
        // zero loss has zero gradient: nothing would move
        return Ok(report);
    }

    let snapshot: Vec<(String, Layer<T>)> = trainable
        .iter()
        .map(|id| (id.clone(), graph.node(id).expect("member").layer.clone()))
        .collect();
    let mut velocity: HashMap<(String, ParamSlot), Tensor<T>> = HashMap::new();
    for id in &trainable {
        for slot in [ParamSlot::Weight, ParamSlot::Bias] {
            let shape = graph
                .node(id)
                .and_then(|n| n.layer.param(slot))
                .expect("param")
                .shape()
                .to_vec();
            velocity.insert((id.clone(), slot), Tensor::zeros(&shape));
        }
    }
    let members: Vec<&str> = unit.members.iter().map(String::as_str).collect();
    let (lr, momentum) = (T::lit(cfg.lr), T::lit(cfg.momentum));
    let mut shuffler = rng::rng(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;

    for it in 0..cfg.iterations {
        if cursor >= n {
            order.shuffle(&mut shuffler);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(n);
        let batch = &order[cursor..end];
        cursor = end;

        let mut tape = Tape::new();
        let mut vars = HashMap::new();
        for id in &unit.inputs {
            vars.insert(id.clone(), tape.constant(inputs[id].gather_batch(batch)));
        }
        let is_trainable = |id: &str, slot: ParamSlot| {
            matches!(slot, ParamSlot::Weight | ParamSlot::Bias) && trainable.iter().any(|t| t == id)
        };
        let (trace, _) = graph.trace(&mut tape, &members, &vars, is_trainable, BnMode::Eval)?;
        let out = trace.outputs[&unit.output];
        let loss = tape
            .mse(out, &targets.gather_batch(batch))
            .map_err(|e| ReconError::Mismatch(e.to_string()))?;
        let lv = tape.value(loss).item().to_f64_lossy();
        if !lv.is_finite() {
            for (id, layer) in snapshot {
                *graph.layer_mut(&id).expect("member") = layer;
            }
            report.aborted = Some(format!("non-finite loss at iteration {it}"));
            report.final_mse = initial_mse;
            log::warn!(
                "unit {}: {}",
                unit.output,
                report.aborted.as_deref().unwrap_or_default()
            );
            return Ok(report);
        }
        report.loss_trace.push(lv);
        let mut grads = tape
            .backward(loss)
            .map_err(|e| ReconError::Mismatch(e.to_string()))?;
        for (id, slot, var) in &trace.params {
            let g = grads.take(*var).expect("gradient for registered parameter");
            let v = velocity.get_mut(&(id.clone(), *slot)).expect("velocity");
            let m = if *slot == ParamSlot::Weight {
                mask.get(id)
            } else {
                None
            };
            let p = graph
                .layer_mut(id)
                .and_then(|l| l.param_mut(*slot))
                .expect("param");
            sgd_step(p, &g, v, lr, momentum, m)?;
        }
    }
    report.final_mse = full_mse(graph)?;
    if !report.final_mse.is_finite() {
        for (id, layer) in snapshot {
            *graph.layer_mut(&id).expect("member") = layer;
        }
        report.aborted = Some("non-finite calibration loss after optimization".into());
        report.final_mse = initial_mse;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Whole-model driver.

#[derive(Debug, Clone)]
pub struct ReconOutcome<T> {
    pub graph: ModelGraph<T>,
    pub units: Vec<UnitReport>,
}

fn check_compatible<T: Scalar>(
    dense: &ModelGraph<T>,
    sparse: &ModelGraph<T>,
    mask: &SparsityMask,
) -> Result<()> {
    if dense.topo_order() != sparse.topo_order() || dense.input_shape() != sparse.input_shape() {
        return Err(ReconError::Mismatch("graph structure differs".into()));
    }
    for id in dense.topo_order() {
        let (a, b) = (
            dense.node(id).expect("node"),
            sparse.node(id).expect("node"),
        );
        if a.kind() != b.kind() || a.inputs != b.inputs {
            return Err(ReconError::Mismatch(format!("node {id:?} differs")));
        }
        if let (Some(wa), Some(wb)) = (a.layer.weight(), b.layer.weight()) {
            if wa.shape() != wb.shape() {
                return Err(ReconError::Mismatch(format!(
                    "weight shape of {id:?} differs"
                )));
            }
            let keep = mask
                .get(id)
                .ok_or_else(|| ReconError::Mismatch(format!("no mask for {id:?}")))?;
            if keep.len() != wb.numel() {
                return Err(ReconError::Mismatch(format!(
                    "mask for {id:?} has {} entries",
                    keep.len()
                )));
            }
        }
    }
    Ok(())
}

/// Runs correction (optional) and reconstruction over every unit in
/// topological order and returns the reconstructed sparse model.
pub fn run_reconstruction<T: Scalar>(
    dense: &ModelGraph<T>,
    sparse: &ModelGraph<T>,
    mask: &SparsityMask,
    calib: &CalibrationSet<T>,
    cfg: &ReconConfig,
) -> Result<ReconOutcome<T>> {
    cfg.validate()?;
    check_compatible(dense, sparse, mask)?;
    let units = partition_units(sparse, cfg.granularity)?;
    let x = calib.inputs();
    let mut dense_acts = dense.forward(x)?;
    dense_acts.insert(GRAPH_INPUT.to_string(), x.clone());

    let mut working = sparse.clone();
    let mut reports = Vec::with_capacity(units.len());
    for (ui, unit) in units.iter().enumerate() {
        if cfg.error_correction {
            for id in unit.prunable_members(&working) {
                let node = dense.node(id).expect("member");
                let corrected = error_correct_layer(
                    &node.layer,
                    &working.node(id).expect("member").layer,
                    mask.get(id).expect("checked"),
                    &dense_acts[&node.inputs[0]],
                    cfg.stats_scope,
                )?;
                *working.layer_mut(id).expect("member") = corrected.layer;
            }
        }
        let inputs: HashMap<String, Tensor<T>> = match cfg.input_mode {
            InputMode::Dense => unit
                .inputs
                .iter()
                .map(|id| (id.clone(), dense_acts[id].clone()))
                .collect(),
            InputMode::Sparse => {
                let mut acts = working.forward(x)?;
                acts.insert(GRAPH_INPUT.to_string(), x.clone());
                unit.inputs
                    .iter()
                    .map(|id| (id.clone(), acts.remove(id).expect("activation")))
                    .collect()
            }
        };
        let seed = rng::sub_seed(cfg.seed, &format!("unit-{ui}"));
        let report = reconstruct_unit(
            &mut working,
            unit,
            mask,
            &inputs,
            &dense_acts[&unit.output],
            cfg,
            seed,
        )?;
        reports.push(report);
    }
    Ok(ReconOutcome {
        graph: working,
        units: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_layer(w: &[f64], out: usize, bias: &[f64]) -> Layer<f64> {
        Layer::Dense {
            weight: Tensor::new(vec![out, w.len() / out], w.to_vec()).unwrap(),
            bias: Tensor::new(vec![out], bias.to_vec()).unwrap(),
        }
    }

    #[test]
    fn per_tensor_worked_example() {
        let d = dense_layer(&[2.0, -2.0, 4.0, -4.0], 1, &[0.0]);
        let s = dense_layer(&[0.0, 0.0, 4.0, -4.0], 1, &[0.0]);
        let mask = [false, false, true, true];
        let x = Tensor::from_fn(&[5, 4], |i| (i as f64 * 0.37).sin());
        let c = error_correct_layer(&d, &s, &mask, &x, StatsScope::PerTensor).unwrap();
        let lambda = 10f64.sqrt() / (8f64.sqrt() + EC_EPS);
        assert!((c.scales[0] - lambda).abs() < 1e-12);
        assert!((c.scales[0] - 1.1180).abs() < 1e-4);
        let w = c.unmasked_weight.data();
        assert!((w[2] - 4.0 * lambda).abs() < 1e-12 && (w[3] + 4.0 * lambda).abs() < 1e-12);
        assert!((w[2] - 4.4721).abs() < 1e-4);
        let (m, sd) = mean_std(w);
        assert!(m.abs() < 1e-12 && (sd - 10f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn identity_when_nothing_pruned() {
        let d = dense_layer(&[0.5, -1.0, 2.0, 0.25, 1.5, -0.75], 2, &[0.1, -0.2]);
        let x = Tensor::from_fn(&[7, 3], |i| (i as f64 * 0.91).cos());
        let c = error_correct_layer(&d, &d, &[true; 6], &x, StatsScope::PerChannel).unwrap();
        assert!(c.layer.weight().unwrap().max_abs_diff(d.weight().unwrap()) < 1e-6);
        assert!(c.layer.bias().unwrap().max_abs_diff(d.bias().unwrap()) < 1e-6);
    }

    #[test]
    fn config_validation() {
        let ok = ReconConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            ReconConfig {
                lr: 0.0,
                ..ok.clone()
            },
            ReconConfig {
                momentum: 1.0,
                ..ok.clone()
            },
            ReconConfig {
                iterations: 0,
                ..ok.clone()
            },
            ReconConfig {
                batch_size: 0,
                ..ok.clone()
            },
        ] {
            assert!(matches!(bad.validate(), Err(ReconError::Config(_))));
        }
        assert_eq!(ok.tag(), "block-sparse-noec");
    }

    #[test]
    fn channel_means_of_matrix() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(channel_means(&t).unwrap(), vec![2.0, 4.0]);
    }
}
