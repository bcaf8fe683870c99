#[path = "support/oracles.rs"]
mod oracles;

use oracles::{gradcheck, randn, FD_STEP, PRIMITIVES};
use postprune::autodiff::Tape;
use postprune::graph::ParamSlot;
use postprune::tensor::BnMode;

#[test]
fn every_primitive_matches_finite_differences() {
    for (i, name) in PRIMITIVES.iter().enumerate() {
        let err = gradcheck(name, 100, 1000 + i as u64);
        assert!(err < 1e-5, "{name}: relative error {err:e}");
    }
}

#[test]
fn softmax_xent_is_tight() {
    let err = gradcheck("softmax_xent", 100, 77);
    assert!(err < 1e-6, "relative error {err:e}");
}

#[test]
fn whole_graph_parameter_gradients() {
    let graph = oracles::small_rescnn(5);
    let mut rng = oracles::rng(9);
    let x = randn(&mut rng, &[3, 2, 4, 4]);
    let r = randn(&mut rng, &[3, 4]);
    let trainable = |_: &str, s: ParamSlot| matches!(s, ParamSlot::Weight | ParamSlot::Bias);

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (trace, _) = graph
        .trace_full(&mut tape, xv, trainable, BnMode::Eval)
        .unwrap();
    let loss = tape.weighted_sum(trace.outputs[graph.exit()], &r).unwrap();
    let grads = tape.backward(loss).unwrap();

    let eval = |g: &postprune::graph::ModelGraph<f64>| -> f64 {
        let y = g.forward(&x).unwrap().remove(g.exit()).unwrap();
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    for (id, slot, var) in &trace.params {
        let analytic = grads.get(*var).unwrap();
        for j in 0..analytic.numel() {
            let mut up = graph.clone();
            up.layer_mut(id)
                .unwrap()
                .param_mut(*slot)
                .unwrap()
                .data_mut()[j] += FD_STEP;
            let mut down = graph.clone();
            down.layer_mut(id)
                .unwrap()
                .param_mut(*slot)
                .unwrap()
                .data_mut()[j] -= FD_STEP;
            let fd = (eval(&up) - eval(&down)) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            assert!(
                (a - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                "{id} {slot:?}[{j}]: {a} vs {fd}"
            );
        }
    }
    assert_eq!(trace.params.len(), 8);
}
