//! Independent reference computations shared by the integration suites.
//!
//! Nothing in here calls the code under test for the quantity being checked;
//! the gradient checker only uses the forward pass of the tape.
#![allow(dead_code, clippy::needless_range_loop)]

use postprune::autodiff::{Tape, Var};
use postprune::graph::{Layer, LayerNode, ModelGraph, GRAPH_INPUT};
use postprune::tensor::{BnMode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type T = Tensor<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> T {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

// ---------------------------------------------------------------------------
// Central finite differences.

pub const FD_STEP: f64 = 1e-5;

/// A primitive under test: the inputs it differentiates and how to apply it.
pub struct GradCase {
    pub inputs: Vec<T>,
    #[allow(clippy::type_complexity)]
    pub apply: Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>,
}

fn scalarize(tape: &mut Tape<f64>, out: Var, r: &T) -> Var {
    tape.weighted_sum(out, r).expect("projection shape")
}

fn eval_case(case: &GradCase, inputs: &[T], r: &T) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (case.apply)(&mut tape, &vars);
    let loss = scalarize(&mut tape, out, r);
    tape.value(loss).item()
}

fn norm(xs: impl Iterator<Item = f64>) -> f64 {
    xs.map(|x| x * x).sum::<f64>().sqrt()
}

/// Worst relative error `‖g_a − g_fd‖ / max(‖g_a‖, ‖g_fd‖)` over all inputs.
pub fn grad_rel_error(case: &GradCase, rng: &mut ChaCha8Rng) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (case.apply)(&mut tape, &vars);
    let r = randn(rng, tape.value(out).shape());
    let loss = scalarize(&mut tape, out, &r);
    let grads = tape.backward(loss).expect("backward");

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("gradient").data().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        let mut probe = case.inputs.clone();
        for (j, g) in numeric.iter_mut().enumerate() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + FD_STEP;
            let up = eval_case(case, &probe, &r);
            probe[i].data_mut()[j] = orig - FD_STEP;
            let down = eval_case(case, &probe, &r);
            probe[i].data_mut()[j] = orig;
            *g = (up - down) / (2.0 * FD_STEP);
        }
        let diff = norm(analytic.iter().zip(&numeric).map(|(a, b)| a - b));
        let scale = norm(analytic.iter().copied()).max(norm(numeric.iter().copied()));
        let err = if scale < 1e-10 { diff } else { diff / scale };
        worst = worst.max(err);
    }
    worst
}

/// Inputs with every entry at least `gap` away from zero (keeps ReLU off its kink).
fn randn_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> T {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = StandardNormal.sample(rng);
        if v.abs() > gap {
            break v;
        }
    })
}

pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "linear",
    "conv2d",
    "batchnorm2d_train",
    "batchnorm2d_eval",
    "relu",
    "add",
    "avgpool2d",
    "flatten",
    "reshape",
    "softmax_xent",
    "mse",
    "sum",
];

/// A random small instance of the named primitive.
pub fn grad_case(name: &str, rng: &mut ChaCha8Rng) -> GradCase {
    let mut d = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    match name {
        "matmul" => {
            let (m, k, n) = (d(1, 4), d(1, 4), d(1, 4));
            GradCase {
                inputs: vec![randn(rng, &[m, k]), randn(rng, &[k, n])],
                apply: Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()),
            }
        }
        "linear" => {
            let (n, i, o) = (d(1, 4), d(1, 5), d(1, 4));
            GradCase {
                inputs: vec![randn(rng, &[n, i]), randn(rng, &[o, i]), randn(rng, &[o])],
                apply: Box::new(|t, v| t.linear(v[0], v[1], Some(v[2])).unwrap()),
            }
        }
        "conv2d" => {
            let (n, c, co) = (d(1, 2), d(1, 3), d(1, 3));
            let (h, w) = (d(3, 5), d(3, 5));
            let (stride, padding) = (d(1, 2), d(0, 1));
            let (kh, kw) = (d(1, 3), d(1, 3));
            GradCase {
                inputs: vec![
                    randn(rng, &[n, c, h, w]),
                    randn(rng, &[co, c, kh, kw]),
                    randn(rng, &[co]),
                ],
                apply: Box::new(move |t, v| {
                    t.conv2d(v[0], v[1], Some(v[2]), stride, padding).unwrap()
                }),
            }
        }
        "batchnorm2d_train" | "batchnorm2d_eval" => {
            let (n, c, h, w) = (d(2, 3), d(1, 3), d(2, 3), d(2, 3));
            let mode = if name.ends_with("train") {
                BnMode::Train
            } else {
                BnMode::Eval
            };
            let rm = randn(rng, &[c]);
            let rv = Tensor::from_fn(&[c], |_| rng.random_range(0.5..2.0));
            GradCase {
                inputs: vec![
                    randn(rng, &[n, c, h, w]),
                    randn(rng, &[c]),
                    randn(rng, &[c]),
                ],
                apply: Box::new(move |t, v| {
                    t.batchnorm2d(v[0], v[1], v[2], &rm, &rv, mode).unwrap().0
                }),
            }
        }
        "relu" => {
            let shape = [d(1, 3), d(1, 6)];
            GradCase {
                inputs: vec![randn_away_from_zero(rng, &shape, 1e-2)],
                apply: Box::new(|t, v| t.relu(v[0]).unwrap()),
            }
        }
        "add" => {
            let shape = [d(1, 3), d(1, 2), d(1, 3), d(1, 3)];
            GradCase {
                inputs: vec![randn(rng, &shape), randn(rng, &shape)],
                apply: Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
            }
        }
        "avgpool2d" => {
            let k = d(1, 2);
            let shape = [d(1, 2), d(1, 2), k * d(1, 3), k * d(1, 3)];
            GradCase {
                inputs: vec![randn(rng, &shape)],
                apply: Box::new(move |t, v| t.avgpool2d(v[0], k).unwrap()),
            }
        }
        "flatten" => {
            let shape = [d(1, 3), d(1, 2), d(1, 3), d(1, 3)];
            GradCase {
                inputs: vec![randn(rng, &shape)],
                apply: Box::new(|t, v| t.flatten(v[0]).unwrap()),
            }
        }
        "reshape" => {
            let (a, b) = (d(1, 4), d(1, 4));
            GradCase {
                inputs: vec![randn(rng, &[a, b])],
                apply: Box::new(move |t, v| t.reshape(v[0], &[b, a]).unwrap()),
            }
        }
        "softmax_xent" => {
            let (n, c) = (d(1, 4), d(2, 5));
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            GradCase {
                inputs: vec![randn(rng, &[n, c])],
                apply: Box::new(move |t, v| t.softmax_xent(v[0], &labels).unwrap()),
            }
        }
        "mse" => {
            let shape = [d(1, 4), d(1, 4)];
            let target = randn(rng, &shape);
            GradCase {
                inputs: vec![randn(rng, &shape)],
                apply: Box::new(move |t, v| t.mse(v[0], &target).unwrap()),
            }
        }
        "sum" => {
            let shape = [d(1, 4), d(1, 4)];
            GradCase {
                inputs: vec![randn(rng, &shape)],
                apply: Box::new(|t, v| t.sum(v[0]).unwrap()),
            }
        }
        other => panic!("no generator for primitive {other}"),
    }
}

/// Worst relative error of `name` over `instances` random instances.
pub fn gradcheck(name: &str, instances: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    (0..instances)
        .map(|_| {
            let case = grad_case(name, &mut rng);
            grad_rel_error(&case, &mut rng)
        })
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Dense linear algebra.

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Minimum of `mean((X W_Kᵀ + b − Y)²)` over the kept weights and the bias of
/// a linear layer, solved row by row via the normal equations.
/// `x` is `[N×d]`, `y` is `[N×out]`, `keep` is `[out×d]` row-major.
pub fn masked_least_squares(x: &T, y: &T, keep: &[bool]) -> f64 {
    let (n, dim) = (x.shape()[0], x.shape()[1]);
    let out = y.shape()[1];
    let mut sse = 0.0;
    for o in 0..out {
        let cols: Vec<usize> = (0..dim).filter(|&j| keep[o * dim + j]).collect();
        let feat = |i: usize, c: usize| {
            if c < cols.len() {
                x.data()[i * dim + cols[c]]
            } else {
                1.0
            }
        };
        let p = cols.len() + 1;
        let mut a = vec![vec![0.0; p]; p];
        let mut b = vec![0.0; p];
        for i in 0..n {
            let yi = y.data()[i * out + o];
            for r in 0..p {
                b[r] += feat(i, r) * yi;
                for c in 0..p {
                    a[r][c] += feat(i, r) * feat(i, c);
                }
            }
        }
        let coef = solve(a, b);
        for i in 0..n {
            let pred: f64 = (0..p).map(|c| coef[c] * feat(i, c)).sum();
            let e = pred - y.data()[i * out + o];
            sse += e * e;
        }
    }
    sse / (n * out) as f64
}

// ---------------------------------------------------------------------------
// Allocation references.

/// ERK densities by enumerating clip sets: clip the `j` highest-scoring layers
/// to density 1, solve the scale on the rest, and accept the first `j` for
/// which the result is consistent.
pub fn erk_by_enumeration(counts: &[f64], scores: &[f64], density_budget: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    for j in 0..=counts.len() {
        let (clipped, rest) = order.split_at(j);
        let fixed: f64 = clipped.iter().map(|&i| counts[i]).sum();
        let denom: f64 = rest.iter().map(|&i| scores[i] * counts[i]).sum();
        if denom == 0.0 {
            return vec![1.0; counts.len()];
        }
        let eps = (density_budget - fixed) / denom;
        let rest_ok = rest.iter().all(|&i| eps * scores[i] <= 1.0 + 1e-12);
        let clip_ok = clipped.iter().all(|&i| eps * scores[i] >= 1.0 - 1e-12);
        if rest_ok && clip_ok {
            let mut d = vec![1.0; counts.len()];
            for &i in rest {
                d[i] = eps * scores[i];
            }
            return d;
        }
    }
    unreachable!("some clip set is always consistent")
}

/// Global magnitude reference: a full sort of every weight by
/// `(w², layer id, flat index)`; the first `round(rate·total)` are pruned.
pub fn global_magnitude_by_sort(
    layers: &[(String, Vec<f64>)],
    rate: f64,
) -> Vec<(String, Vec<bool>)> {
    let mut all: Vec<(f64, &str, usize)> = Vec::new();
    for (id, w) in layers {
        all.extend(w.iter().enumerate().map(|(i, v)| (v * v, id.as_str(), i)));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
    let k = (rate * all.len() as f64).round() as usize;
    let mut keep: Vec<(String, Vec<bool>)> = layers
        .iter()
        .map(|(id, w)| (id.clone(), vec![true; w.len()]))
        .collect();
    for &(_, id, i) in &all[..k] {
        keep.iter_mut().find(|(l, _)| l == id).unwrap().1[i] = false;
    }
    keep
}

// ---------------------------------------------------------------------------
// Small random graphs.

fn dense(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Layer<f64> {
    let s = (1.0 / inp as f64).sqrt();
    Layer::Dense {
        weight: randn(rng, &[out, inp]).scale(s),
        bias: randn(rng, &[out]).scale(0.1),
    }
}

fn conv(rng: &mut ChaCha8Rng, out: usize, inp: usize, k: usize) -> Layer<f64> {
    let s = (1.0 / (inp * k * k) as f64).sqrt();
    Layer::Conv2d {
        weight: randn(rng, &[out, inp, k, k]).scale(s),
        bias: randn(rng, &[out]).scale(0.1),
        stride: 1,
        padding: k / 2,
    }
}

fn bn(rng: &mut ChaCha8Rng, c: usize) -> Layer<f64> {
    Layer::BatchNorm2d {
        gamma: Tensor::from_fn(&[c], |_| rng.random_range(0.5..1.5)),
        beta: randn(rng, &[c]).scale(0.1),
        running_mean: randn(rng, &[c]).scale(0.1),
        running_var: Tensor::from_fn(&[c], |_| rng.random_range(0.5..1.5)),
    }
}

/// Three dense layers with ReLUs, input `[6]`.
pub fn mlp(seed: u64) -> ModelGraph<f64> {
    let mut r = rng(seed);
    let nodes = vec![
        LayerNode::new("fc1", dense(&mut r, 8, 6), &[GRAPH_INPUT]),
        LayerNode::new("act1", Layer::Relu, &["fc1"]),
        LayerNode::new("fc2", dense(&mut r, 8, 8), &["act1"]),
        LayerNode::new("act2", Layer::Relu, &["fc2"]),
        LayerNode::new("fc3", dense(&mut r, 3, 8), &["act2"]),
    ];
    ModelGraph::new(vec![6], nodes, "fc1", "fc3").unwrap()
}

/// Conv stem plus one residual block and a dense head, input `[2×4×4]`.
pub fn small_rescnn(seed: u64) -> ModelGraph<f64> {
    let mut r = rng(seed);
    let nodes = vec![
        LayerNode::new("stem", conv(&mut r, 3, 2, 3), &[GRAPH_INPUT]),
        LayerNode::new("stem_bn", bn(&mut r, 3), &["stem"]),
        LayerNode::new("stem_act", Layer::Relu, &["stem_bn"]),
        LayerNode::new("b1_conv1", conv(&mut r, 3, 3, 3), &["stem_act"]),
        LayerNode::new("b1_bn1", bn(&mut r, 3), &["b1_conv1"]),
        LayerNode::new("b1_act1", Layer::Relu, &["b1_bn1"]),
        LayerNode::new("b1_conv2", conv(&mut r, 3, 3, 3), &["b1_act1"]),
        LayerNode::new("b1_bn2", bn(&mut r, 3), &["b1_conv2"]),
        LayerNode::new("b1_add", Layer::ResidualAdd, &["b1_bn2", "stem_act"]),
        LayerNode::new("b1_act", Layer::Relu, &["b1_add"]),
        LayerNode::new("pool", Layer::AvgPool2d { kernel: 2 }, &["b1_act"]),
        LayerNode::new("flat", Layer::Flatten, &["pool"]),
        LayerNode::new("head", dense(&mut r, 4, 12), &["flat"]),
    ];
    ModelGraph::new(vec![2, 4, 4], nodes, "stem", "head").unwrap()
}
