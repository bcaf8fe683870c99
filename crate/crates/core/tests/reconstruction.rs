#[path = "support/oracles.rs"]
mod oracles;

use std::collections::HashMap;

use oracles::{masked_least_squares, randn};
use postprune::allocation::{allocate, apply_plan, AllocOptions, SparsityMask, Strategy};
use postprune::graph::{partition_units, Granularity, Layer, LayerNode, ModelGraph, GRAPH_INPUT};
use postprune::reconstruction::{
    reconstruct_unit, run_reconstruction, CalibrationSet, InputMode, ReconConfig, StatsScope,
};
use postprune::rng::sub_seed;
use postprune::tensor::Tensor;

fn cfg(granularity: Granularity, input_mode: InputMode, error_correction: bool) -> ReconConfig {
    ReconConfig {
        granularity,
        input_mode,
        error_correction,
        stats_scope: StatsScope::PerChannel,
        lr: 1e-2,
        momentum: 0.9,
        iterations: 150,
        batch_size: 16,
        seed: 3,
    }
}

fn sparsify(g: &ModelGraph<f64>, rate: f64) -> (SparsityMask, ModelGraph<f64>) {
    let plan = allocate(g, Strategy::GlobalMagnitude, rate, AllocOptions::default()).unwrap();
    apply_plan(g, &plan).unwrap()
}

fn zero_pattern(g: &ModelGraph<f64>) -> Vec<(String, Vec<bool>)> {
    g.prunable_ids()
        .into_iter()
        .map(|id| {
            (
                id.to_string(),
                g.node(id)
                    .unwrap()
                    .layer
                    .weight()
                    .unwrap()
                    .data()
                    .iter()
                    .map(|&v| v == 0.0)
                    .collect(),
            )
        })
        .collect()
}

#[test]
fn linear_unit_reaches_masked_least_squares_optimum() {
    for seed in 0..3 {
        let mut rng = oracles::rng(seed);
        let layer = Layer::Dense {
            weight: randn(&mut rng, &[4, 8]),
            bias: randn(&mut rng, &[4]),
        };
        let g = ModelGraph::new(
            vec![8],
            vec![LayerNode::new("fc", layer, &[GRAPH_INPUT])],
            "fc",
            "fc",
        )
        .unwrap();
        let (mask, mut sparse) = sparsify(&g, 0.5);
        let x = randn(&mut rng, &[64, 8]);
        let y = g.predict(&x).unwrap();
        let optimum = masked_least_squares(&x, &y, mask.get("fc").unwrap());

        let unit = &partition_units(&sparse, Granularity::LayerWise).unwrap()[0];
        let inputs = HashMap::from([(GRAPH_INPUT.to_string(), x.clone())]);
        let c = ReconConfig {
            lr: 0.05,
            iterations: 2000,
            batch_size: 64,
            ..ReconConfig::default()
        };
        let report = reconstruct_unit(&mut sparse, unit, &mask, &inputs, &y, &c, 1).unwrap();
        assert!(report.aborted.is_none());
        assert!(
            report.final_mse <= 1.05 * optimum,
            "seed {seed}: {} vs optimum {optimum}",
            report.final_mse
        );
        assert!(
            optimum <= report.final_mse * (1.0 + 1e-9),
            "oracle beat by {}",
            report.final_mse
        );
    }
}

#[test]
fn every_unit_improves_and_sparsity_is_kept() {
    let graphs = [
        ("mlp", oracles::mlp(4)),
        ("rescnn", oracles::small_rescnn(4)),
    ];
    for (name, dense) in &graphs {
        let shape: Vec<usize> = std::iter::once(48)
            .chain(dense.input_shape().iter().copied())
            .collect();
        let calib = CalibrationSet::new(randn(&mut oracles::rng(8), &shape)).unwrap();
        let (mask, sparse) = sparsify(dense, 0.6);
        for granularity in Granularity::ALL {
            for mode in [InputMode::Sparse, InputMode::Dense] {
                for ec in [false, true] {
                    let out = run_reconstruction(
                        dense,
                        &sparse,
                        &mask,
                        &calib,
                        &cfg(granularity, mode, ec),
                    )
                    .unwrap();
                    for u in &out.units {
                        assert!(
                            u.final_mse <= u.initial_mse,
                            "{name} {granularity} {mode} ec={ec} unit {}: {} > {}",
                            u.output,
                            u.final_mse,
                            u.initial_mse
                        );
                    }
                    assert_eq!(
                        zero_pattern(&out.graph),
                        zero_pattern(&sparse),
                        "{name} {granularity} {mode} ec={ec}"
                    );
                }
            }
        }
    }
}

#[test]
fn rate_zero_leaves_the_model_untouched() {
    let dense = oracles::small_rescnn(1);
    let (mask, sparse) = sparsify(&dense, 0.0);
    let calib = CalibrationSet::new(randn(&mut oracles::rng(2), &[8, 2, 4, 4])).unwrap();
    let c = ReconConfig {
        iterations: 1,
        ..cfg(Granularity::BlockWise, InputMode::Sparse, false)
    };
    let out = run_reconstruction(&dense, &sparse, &mask, &calib, &c).unwrap();
    assert_eq!(out.graph, sparse);
    assert!(out
        .units
        .iter()
        .all(|u| u.initial_mse == 0.0 && u.loss_trace.is_empty()));
}

#[test]
fn one_unit_model_makes_input_mode_irrelevant() {
    let mut rng = oracles::rng(6);
    let nodes = vec![
        LayerNode::new(
            "fc",
            Layer::Dense {
                weight: randn(&mut rng, &[5, 6]),
                bias: randn(&mut rng, &[5]),
            },
            &[GRAPH_INPUT],
        ),
        LayerNode::new("act", Layer::Relu, &["fc"]),
    ];
    let dense = ModelGraph::new(vec![6], nodes, "fc", "act").unwrap();
    let (mask, sparse) = sparsify(&dense, 0.5);
    let calib = CalibrationSet::new(randn(&mut rng, &[32, 6])).unwrap();
    let a = run_reconstruction(
        &dense,
        &sparse,
        &mask,
        &calib,
        &cfg(Granularity::LayerWise, InputMode::Sparse, false),
    )
    .unwrap();
    let b = run_reconstruction(
        &dense,
        &sparse,
        &mask,
        &calib,
        &cfg(Granularity::LayerWise, InputMode::Dense, false),
    )
    .unwrap();
    assert_eq!(a.units.len(), 1);
    assert_eq!(a.graph, b.graph);
}

/// Replays the driver by hand: the second unit's sparse-mode inputs must be
/// the dense inputs shifted by the first unit's remaining output error.
#[test]
fn sparse_input_carries_the_previous_residual() {
    let dense = oracles::mlp(7);
    let (mask, sparse) = sparsify(&dense, 0.5);
    let x = randn(&mut oracles::rng(3), &[32, 6]);
    let calib = CalibrationSet::new(x.clone()).unwrap();
    let c = cfg(Granularity::LayerWise, InputMode::Sparse, false);
    let units = partition_units(&sparse, Granularity::LayerWise).unwrap();
    assert_eq!(units.len(), 3);

    let dense_acts = dense.forward(&x).unwrap();
    let mut work = sparse.clone();
    let inputs0 = HashMap::from([(GRAPH_INPUT.to_string(), x.clone())]);
    let target0 = &dense_acts[&units[0].output];
    reconstruct_unit(
        &mut work,
        &units[0],
        &mask,
        &inputs0,
        target0,
        &c,
        sub_seed(c.seed, "unit-0"),
    )
    .unwrap();

    let sparse_acts = work.forward(&x).unwrap();
    let input_id = &units[1].inputs[0];
    let residual = sparse_acts[input_id]
        .zip_map(&dense_acts[input_id], "residual", |a, b| a - b)
        .unwrap();
    let rebuilt = dense_acts[input_id]
        .zip_map(&residual, "rebuild", |a, b| a + b)
        .unwrap();
    assert!(rebuilt.max_abs_diff(&sparse_acts[input_id]) < 1e-12);
    assert!(residual.data().iter().any(|&v| v != 0.0));

    let inputs1 = HashMap::from([(input_id.clone(), sparse_acts[input_id].clone())]);
    reconstruct_unit(
        &mut work,
        &units[1],
        &mask,
        &inputs1,
        &dense_acts[&units[1].output],
        &c,
        sub_seed(c.seed, "unit-1"),
    )
    .unwrap();
    let driver = run_reconstruction(&dense, &sparse, &mask, &calib, &c).unwrap();
    for id in ["fc1", "fc2"] {
        assert_eq!(
            driver.graph.node(id).unwrap().layer,
            work.node(id).unwrap().layer,
            "{id}"
        );
    }
}

#[test]
fn reconstruction_is_reproducible() {
    let dense = oracles::small_rescnn(3);
    let (mask, sparse) = sparsify(&dense, 0.7);
    let calib = CalibrationSet::new(randn(&mut oracles::rng(5), &[24, 2, 4, 4])).unwrap();
    let c = cfg(Granularity::BlockWise, InputMode::Sparse, true);
    let a = run_reconstruction(&dense, &sparse, &mask, &calib, &c).unwrap();
    let b = run_reconstruction(&dense, &sparse, &mask, &calib, &c).unwrap();
    assert_eq!(a.graph, b.graph);
    assert_eq!(a.units, b.units);
}

#[test]
fn divergence_restores_the_unit() {
    let dense = oracles::mlp(2);
    let (mask, sparse) = sparsify(&dense, 0.5);
    let calib = CalibrationSet::new(randn(&mut oracles::rng(5), &[16, 6]).scale(1e3)).unwrap();
    let c = ReconConfig {
        lr: 1e6,
        momentum: 0.0,
        iterations: 50,
        ..cfg(Granularity::LayerWise, InputMode::Dense, false)
    };
    let out = run_reconstruction(&dense, &sparse, &mask, &calib, &c).unwrap();
    assert!(out.units.iter().any(|u| u.aborted.is_some()));
    for u in out.units.iter().filter(|u| u.aborted.is_some()) {
        for m in &u.members {
            assert_eq!(
                out.graph.node(m).unwrap().layer,
                sparse.node(m).unwrap().layer
            );
        }
    }
}

#[test]
fn structural_mismatch_is_rejected() {
    let dense = oracles::mlp(1);
    let other = oracles::small_rescnn(1);
    let (mask, _) = sparsify(&dense, 0.5);
    let calib = CalibrationSet::new(Tensor::ones(&[4, 6])).unwrap();
    let c = cfg(Granularity::LayerWise, InputMode::Sparse, false);
    assert!(run_reconstruction(&dense, &other, &mask, &calib, &c).is_err());
    assert!(run_reconstruction(&dense, &dense, &SparsityMask::default(), &calib, &c).is_err());
}
