//! Sparsity allocation: per-layer rates from a global target, and their
//! realization as magnitude masks.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::graph::{Layer, ModelGraph};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AllocError {
    #[error("sparsity rate {0} out of range")]
    RateOutOfRange(f64),
    #[error("plan does not cover prunable layer {0:?}")]
    MissingLayer(String),
    #[error("plan names {0:?}, which is not a prunable layer")]
    UnknownLayer(String),
    #[error("plan zeroes {actual} elements, budget is {target} (tolerance {tolerance})")]
    Budget {
        actual: f64,
        target: f64,
        tolerance: f64,
    },
    #[error("plan line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, AllocError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    /// Same rate for every layer.
    Uniform,
    /// Global ranking of all weights by squared magnitude.
    GlobalMagnitude,
    /// Erdős–Rényi-Kernel densities.
    Erk,
    /// Externally supplied (e.g. learned) plan.
    Custom,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Uniform => "uniform",
            Strategy::GlobalMagnitude => "magnitude",
            Strategy::Erk => "erk",
            Strategy::Custom => "custom",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "uniform" => Ok(Strategy::Uniform),
            "magnitude" | "l2norm" | "global_magnitude" => Ok(Strategy::GlobalMagnitude),
            "erk" => Ok(Strategy::Erk),
            "custom" => Ok(Strategy::Custom),
            other => Err(format!(
                "unknown allocator {other:?} (expected uniform, magnitude, erk or custom)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AllocOptions {
    /// Keep the final prunable layer dense. It is excluded from ranking and
    /// from the budget; its share is not redistributed.
    pub keep_last_dense: bool,
}

/// Per-layer sparsity rates.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationPlan {
    pub rates: BTreeMap<String, f64>,
    pub global_rate: f64,
    pub strategy: Strategy,
    pub exempt: BTreeSet<String>,
}

impl AllocationPlan {
    pub fn rate(&self, id: &str) -> Option<f64> {
        self.rates.get(id).copied()
    }

    /// `<layer_id> <rate>` lines, the custom-plan file format.
    pub fn to_plan_file(&self) -> String {
        let mut s = format!("# strategy {} global {}\n", self.strategy, self.global_rate);
        for (id, r) in &self.rates {
            s.push_str(&format!("{id} {r}\n"));
        }
        s
    }
}

/// Keep-mask per prunable layer (true = keep), flattened in weight order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SparsityMask {
    layers: BTreeMap<String, Vec<bool>>,
}

impl SparsityMask {
    pub fn insert(&mut self, id: String, keep: Vec<bool>) {
        self.layers.insert(id, keep);
    }

    pub fn get(&self, id: &str) -> Option<&[bool]> {
        self.layers.get(id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[bool])> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn zeros(&self, id: &str) -> Option<usize> {
        self.get(id).map(|k| k.iter().filter(|&&b| !b).count())
    }

    pub fn total_zeros(&self) -> usize {
        self.layers.values().flatten().filter(|&&b| !b).count()
    }

    pub fn total(&self) -> usize {
        self.layers.values().map(Vec::len).sum()
    }

    /// Fraction of masked-out elements over all layers.
    pub fn global_sparsity(&self) -> f64 {
        self.total_zeros() as f64 / self.total().max(1) as f64
    }

    pub fn layer_sparsity(&self, id: &str) -> Option<f64> {
        let keep = self.get(id)?;
        Some(self.zeros(id)? as f64 / keep.len().max(1) as f64)
    }

    /// True when every layer keeps every weight.
    pub fn is_dense(&self) -> bool {
        self.layers.values().flatten().all(|&b| b)
    }
}

/// Number of weights a layer of `count` elements loses at `rate`:
/// `floor(rate·count)`, with products that land within rounding noise of
/// an integer treated as that integer.
pub fn zero_count(rate: f64, count: usize) -> usize {
    let z = rate * count as f64;
    let r = z.round();
    let z = if (z - r).abs() <= 1e-9 * (count.max(1) as f64) {
        r
    } else {
        z.floor()
    };
    (z.max(0.0) as usize).min(count)
}

fn check_rate(rate: f64) -> Result<()> {
    if rate.is_finite() && (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(AllocError::RateOutOfRange(rate))
    }
}

struct PrunableLayer<'a, T> {
    id: &'a str,
    layer: &'a Layer<T>,
    count: usize,
}

/// Prunable layers sorted by id, and the exempt set.
fn layers<'a, T: Scalar>(
    graph: &'a ModelGraph<T>,
    opts: AllocOptions,
) -> (Vec<PrunableLayer<'a, T>>, BTreeSet<String>) {
    let ids = graph.prunable_ids();
    let mut exempt = BTreeSet::new();
    if opts.keep_last_dense {
        if let Some(last) = ids.last() {
            exempt.insert(last.to_string());
        }
    }
    let mut out: Vec<PrunableLayer<'a, T>> = ids
        .into_iter()
        .map(|id| {
            let layer = &graph.node(id).expect("prunable node").layer;
            PrunableLayer {
                id,
                layer,
                count: layer.weight().expect("prunable has weight").numel(),
            }
        })
        .collect();
    out.sort_by(|a, b| a.id.cmp(b.id));
    (out, exempt)
}

pub fn allocate_uniform<T: Scalar>(
    graph: &ModelGraph<T>,
    global_rate: f64,
    opts: AllocOptions,
) -> Result<AllocationPlan> {
    check_rate(global_rate)?;
    let (layers, exempt) = layers(graph, opts);
    let rates = layers
        .iter()
        .map(|l| {
            (
                l.id.to_string(),
                if exempt.contains(l.id) {
                    0.0
                } else {
                    global_rate
                },
            )
        })
        .collect();
    Ok(AllocationPlan {
        rates,
        global_rate,
        strategy: Strategy::Uniform,
        exempt,
    })
}

/// Squared-magnitude score used for ranking.
fn score<T: Scalar>(w: T) -> f64 {
    let w = w.to_f64_lossy();
    w * w
}

pub fn allocate_global_magnitude<T: Scalar>(
    graph: &ModelGraph<T>,
    global_rate: f64,
    opts: AllocOptions,
) -> Result<AllocationPlan> {
    check_rate(global_rate)?;
    let (layers, exempt) = layers(graph, opts);
    let ranked: Vec<&PrunableLayer<T>> = layers.iter().filter(|l| !exempt.contains(l.id)).collect();
    let total: usize = ranked.iter().map(|l| l.count).sum();
    let k = (global_rate * total as f64).round() as usize;

    // (score, layer position in id order, flat index)
    let mut entries: Vec<(f64, usize, usize)> = Vec::with_capacity(total);
    for (li, l) in ranked.iter().enumerate() {
        let w = l.layer.weight().expect("prunable has weight");
        entries.extend(w.data().iter().enumerate().map(|(i, &v)| (score(v), li, i)));
    }
    if k > 0 && k < entries.len() {
        entries.select_nth_unstable_by(k - 1, cmp_entry);
    }
    let mut zeros = vec![0usize; ranked.len()];
    for e in entries.iter().take(k) {
        zeros[e.1] += 1;
    }
    let mut rates: BTreeMap<String, f64> = layers.iter().map(|l| (l.id.to_string(), 0.0)).collect();
    for (li, l) in ranked.iter().enumerate() {
        rates.insert(l.id.to_string(), zeros[li] as f64 / l.count as f64);
    }
    Ok(AllocationPlan {
        rates,
        global_rate,
        strategy: Strategy::GlobalMagnitude,
        exempt,
    })
}

fn cmp_entry(a: &(f64, usize, usize), b: &(f64, usize, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

/// Raw ERK density score: `(Cin+Cout+kh+kw)/(Cin·Cout·kh·kw)` for
/// convolutions, `(n_in+n_out)/(n_in·n_out)` for dense layers.
pub fn erk_score<T: Scalar>(layer: &Layer<T>) -> Option<f64> {
    let shape = layer.weight()?.shape();
    let (num, den): (usize, usize) = match layer {
        Layer::Conv2d { .. } => (shape.iter().sum(), shape.iter().product()),
        Layer::Dense { .. } => (shape[0] + shape[1], shape[0] * shape[1]),
        _ => return None,
    };
    Some(num as f64 / den as f64)
}

pub fn allocate_erk<T: Scalar>(
    graph: &ModelGraph<T>,
    global_rate: f64,
    opts: AllocOptions,
) -> Result<AllocationPlan> {
    check_rate(global_rate)?;
    let (layers, exempt) = layers(graph, opts);
    let active: Vec<(&str, f64, f64)> = layers
        .iter()
        .filter(|l| !exempt.contains(l.id))
        .map(|l| {
            (
                l.id,
                l.count as f64,
                erk_score(l.layer).expect("prunable layer"),
            )
        })
        .collect();
    let total: f64 = active.iter().map(|a| a.1).sum();
    let budget = (1.0 - global_rate) * total;

    // water-filling: solve the scale on unclipped layers, clip, repeat
    let mut clipped = vec![false; active.len()];
    let mut scale = 0.0;
    loop {
        let fixed: f64 = active
            .iter()
            .zip(&clipped)
            .filter(|(_, &c)| c)
            .map(|(a, _)| a.1)
            .sum();
        let denom: f64 = active
            .iter()
            .zip(&clipped)
            .filter(|(_, &c)| !c)
            .map(|(a, _)| a.2 * a.1)
            .sum();
        if denom == 0.0 {
            break;
        }
        scale = (budget - fixed) / denom;
        let mut changed = false;
        for (a, c) in active.iter().zip(clipped.iter_mut()) {
            if !*c && scale * a.2 > 1.0 {
                *c = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut rates: BTreeMap<String, f64> = layers.iter().map(|l| (l.id.to_string(), 0.0)).collect();
    for (a, &c) in active.iter().zip(&clipped) {
        let density = if c { 1.0 } else { scale * a.2 };
        rates.insert(a.0.to_string(), (1.0 - density).clamp(0.0, 1.0));
    }
    Ok(AllocationPlan {
        rates,
        global_rate,
        strategy: Strategy::Erk,
        exempt,
    })
}

/// Parses `<layer_id> <rate>` lines; `#` starts a comment.
pub fn parse_plan_file(text: &str) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [id, rate] = parts.as_slice() else {
            return Err(AllocError::Parse {
                line: i + 1,
                msg: format!("expected `<layer_id> <rate>`, got {line:?}"),
            });
        };
        let rate: f64 = rate.parse().map_err(|_| AllocError::Parse {
            line: i + 1,
            msg: format!("bad rate {rate:?}"),
        })?;
        out.push((id.to_string(), rate));
    }
    Ok(out)
}

/// Validates and adopts an externally produced plan (the learned-allocator plug-point).
pub fn allocate_custom<T: Scalar>(
    graph: &ModelGraph<T>,
    global_rate: f64,
    plan_text: &str,
) -> Result<AllocationPlan> {
    check_rate(global_rate)?;
    let entries = parse_plan_file(plan_text)?;
    let (layers, _) = layers(graph, AllocOptions::default());
    let mut rates = BTreeMap::new();
    for (id, rate) in entries {
        if !layers.iter().any(|l| l.id == id) {
            return Err(AllocError::UnknownLayer(id));
        }
        if !(0.0..=1.0).contains(&rate) {
            return Err(AllocError::RateOutOfRange(rate));
        }
        rates.insert(id, rate);
    }
    if let Some(missing) = layers.iter().find(|l| !rates.contains_key(l.id)) {
        return Err(AllocError::MissingLayer(missing.id.to_string()));
    }
    let total: usize = layers.iter().map(|l| l.count).sum();
    let actual: f64 = layers.iter().map(|l| rates[l.id] * l.count as f64).sum();
    let target = (global_rate * total as f64).round();
    let tolerance = layers.len() as f64;
    if (actual - target).abs() > tolerance {
        return Err(AllocError::Budget {
            actual,
            target,
            tolerance,
        });
    }
    Ok(AllocationPlan {
        rates,
        global_rate,
        strategy: Strategy::Custom,
        exempt: BTreeSet::new(),
    })
}

/// Dispatches to the built-in allocators (`Custom` needs [`allocate_custom`]).
pub fn allocate<T: Scalar>(
    graph: &ModelGraph<T>,
    strategy: Strategy,
    global_rate: f64,
    opts: AllocOptions,
) -> Result<AllocationPlan> {
    match strategy {
        Strategy::Uniform => allocate_uniform(graph, global_rate, opts),
        Strategy::GlobalMagnitude => allocate_global_magnitude(graph, global_rate, opts),
        Strategy::Erk => allocate_erk(graph, global_rate, opts),
        Strategy::Custom => Err(AllocError::Parse {
            line: 0,
            msg: "custom allocation needs a plan file".into(),
        }),
    }
}

/// Masks the `floor(rate·count)` smallest-magnitude weights of each layer
/// (ties by flat index) and returns the mask with a zeroed clone of the graph.
pub fn apply_plan<T: Scalar>(
    graph: &ModelGraph<T>,
    plan: &AllocationPlan,
) -> Result<(SparsityMask, ModelGraph<T>)> {
    let (layers, _) = layers(graph, AllocOptions::default());
    if let Some(extra) = plan
        .rates
        .keys()
        .find(|k| !layers.iter().any(|l| l.id == k.as_str()))
    {
        return Err(AllocError::UnknownLayer(extra.clone()));
    }
    let mut mask = SparsityMask::default();
    let mut sparse = graph.clone();
    for l in &layers {
        let rate = plan
            .rate(l.id)
            .ok_or_else(|| AllocError::MissingLayer(l.id.to_string()))?;
        if !(0.0..=1.0).contains(&rate) {
            return Err(AllocError::RateOutOfRange(rate));
        }
        let w = l.layer.weight().expect("prunable has weight");
        let z = zero_count(rate, l.count);
        let mut order: Vec<(f64, usize, usize)> = w
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (score(v), 0, i))
            .collect();
        if z > 0 && z < order.len() {
            order.select_nth_unstable_by(z - 1, cmp_entry);
        }
        let mut keep = vec![true; l.count];
        for e in order.iter().take(z) {
            keep[e.2] = false;
        }
        let wm = sparse
            .layer_mut(l.id)
            .and_then(Layer::weight_mut)
            .expect("prunable has weight");
        for (v, &k) in wm.data_mut().iter_mut().zip(&keep) {
            if !k {
                *v = T::zero();
            }
        }
        mask.insert(l.id.to_string(), keep);
    }
    Ok((mask, sparse))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{LayerNode, GRAPH_INPUT};
    use crate::tensor::Tensor;

    fn dense(out: usize, inp: usize, w: &[f64]) -> Layer<f64> {
        Layer::Dense {
            weight: Tensor::new(vec![out, inp], w.to_vec()).unwrap(),
            bias: Tensor::zeros(&[out]),
        }
    }

    /// L1 = [0.1, -0.4] (1×2), L2 = [0.2, 0.3, -0.05, 0.5] (2×2 on L1's single output is
    /// impossible, so L2 reads a 2-wide input through a separate chain).
    fn two_layer() -> ModelGraph<f64> {
        let nodes = vec![
            LayerNode::new("L1", dense(1, 2, &[0.1, -0.4]), &[GRAPH_INPUT]),
            LayerNode::new("L2", dense(4, 1, &[0.2, 0.3, -0.05, 0.5]), &["L1"]),
        ];
        ModelGraph::new(vec![2], nodes, "L1", "L2").unwrap()
    }

    fn three_layer() -> ModelGraph<f64> {
        let nodes = vec![
            LayerNode::new("a", dense(2, 2, &[1.0, -2.0, 3.0, 0.5]), &[GRAPH_INPUT]),
            LayerNode::new("b", dense(2, 2, &[0.1, 0.2, -0.3, 0.4]), &["a"]),
            LayerNode::new("c", dense(2, 2, &[5.0, 6.0, 7.0, 8.0]), &["b"]),
        ];
        ModelGraph::new(vec![2], nodes, "a", "c").unwrap()
    }

    #[test]
    fn uniform_rates() {
        let g = three_layer();
        let p = allocate_uniform(&g, 0.5, AllocOptions::default()).unwrap();
        assert!(p.rates.values().all(|&r| r == 0.5));
        let p = allocate_uniform(
            &g,
            0.5,
            AllocOptions {
                keep_last_dense: true,
            },
        )
        .unwrap();
        assert_eq!(
            p.rates.values().copied().collect::<Vec<_>>(),
            vec![0.5, 0.5, 0.0]
        );
        let p = allocate_uniform(&g, 0.0, AllocOptions::default()).unwrap();
        let (mask, sparse) = apply_plan(&g, &p).unwrap();
        assert!(mask.is_dense());
        assert_eq!(sparse, g);
    }

    #[test]
    fn rate_range_checked() {
        let g = three_layer();
        for r in [-0.1, 1.0, f64::NAN] {
            assert!(matches!(
                allocate_erk(&g, r, AllocOptions::default()),
                Err(AllocError::RateOutOfRange(_))
            ));
        }
    }

    #[test]
    fn global_magnitude_forced_by_sorting() {
        let g = two_layer();
        let p = allocate_global_magnitude(&g, 0.5, AllocOptions::default()).unwrap();
        assert_eq!(p.rate("L1"), Some(0.5));
        assert_eq!(p.rate("L2"), Some(0.5));
        let (mask, sparse) = apply_plan(&g, &p).unwrap();
        assert_eq!(mask.get("L1").unwrap(), &[false, true]);
        assert_eq!(mask.get("L2").unwrap(), &[false, true, false, true]);
        let w = sparse.node("L2").unwrap().layer.weight().unwrap();
        assert_eq!(w.data(), &[0.0, 0.3, 0.0, 0.5]);
    }

    #[test]
    fn equal_weights_follow_tie_rule() {
        let nodes = vec![
            LayerNode::new("b", dense(2, 2, &[1.0; 4]), &[GRAPH_INPUT]),
            LayerNode::new("a", dense(2, 2, &[-1.0; 4]), &["b"]),
        ];
        let g = ModelGraph::new(vec![2], nodes, "b", "a").unwrap();
        let p = allocate_global_magnitude(&g, 0.75, AllocOptions::default()).unwrap();
        // 6 zeros: all of "a" first, then the first two of "b"
        assert_eq!(p.rate("a"), Some(1.0));
        assert_eq!(p.rate("b"), Some(0.5));
        let (mask, _) = apply_plan(&g, &p).unwrap();
        assert_eq!(mask.get("b").unwrap(), &[false, false, true, true]);
    }

    #[test]
    fn apply_plan_zeroes_smallest() {
        let nodes = vec![LayerNode::new(
            "l",
            dense(1, 4, &[3.0, -1.0, 2.0, -4.0]),
            &[GRAPH_INPUT],
        )];
        let g = ModelGraph::new(vec![4], nodes, "l", "l").unwrap();
        let p = allocate_uniform(&g, 0.5, AllocOptions::default()).unwrap();
        let (mask, sparse) = apply_plan(&g, &p).unwrap();
        assert_eq!(mask.get("l").unwrap(), &[true, false, false, true]);
        assert_eq!(
            sparse.node("l").unwrap().layer.weight().unwrap().data(),
            &[3.0, 0.0, 0.0, -4.0]
        );
    }

    #[test]
    fn erk_conv_score() {
        let l = Layer::<f64>::Conv2d {
            weight: Tensor::zeros(&[8, 3, 3, 3]),
            bias: Tensor::zeros(&[8]),
            stride: 1,
            padding: 1,
        };
        assert!((erk_score(&l).unwrap() - 17.0 / 216.0).abs() < 1e-15);
    }

    #[test]
    fn erk_identical_layers_get_global_rate() {
        let nodes = vec![
            LayerNode::new("a", dense(3, 3, &[1.0; 9]), &[GRAPH_INPUT]),
            LayerNode::new("b", dense(3, 3, &[2.0; 9]), &["a"]),
        ];
        let g = ModelGraph::new(vec![3], nodes, "a", "b").unwrap();
        let p = allocate_erk(&g, 0.6, AllocOptions::default()).unwrap();
        for r in p.rates.values() {
            assert!((r - 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn keep_last_dense_under_every_allocator() {
        let g = three_layer();
        let opts = AllocOptions {
            keep_last_dense: true,
        };
        for s in [Strategy::Uniform, Strategy::GlobalMagnitude, Strategy::Erk] {
            let p = allocate(&g, s, 0.7, opts).unwrap();
            let (mask, _) = apply_plan(&g, &p).unwrap();
            assert!(mask.get("c").unwrap().iter().all(|&k| k), "{s}");
        }
    }

    #[test]
    fn custom_plan_validation() {
        let g = three_layer();
        let uniform = allocate_uniform(&g, 0.5, AllocOptions::default()).unwrap();
        let p = allocate_custom(&g, 0.5, &uniform.to_plan_file()).unwrap();
        assert_eq!(p.rates, uniform.rates);
        assert_eq!(
            allocate_custom(&g, 0.5, "a 1.2\nb 0.5\nc 0.5").unwrap_err(),
            AllocError::RateOutOfRange(1.2)
        );
        assert_eq!(
            allocate_custom(&g, 0.5, "a 0.5 # first\nb 0.5\n").unwrap_err(),
            AllocError::MissingLayer("c".into())
        );
        assert!(matches!(
            allocate_custom(&g, 0.5, "a 1\nb 1\nc 1"),
            Err(AllocError::Budget { .. })
        ));
        assert!(matches!(
            allocate_custom(&g, 0.5, "a 0.5 extra"),
            Err(AllocError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn zero_count_absorbs_rounding_noise() {
        assert_eq!(zero_count(0.5, 7), 3);
        assert_eq!(zero_count(3.0 / 7.0, 7), 3);
        assert_eq!(zero_count(1.0, 5), 5);
        for count in 1..200usize {
            for z in 0..=count {
                assert_eq!(zero_count(z as f64 / count as f64, count), z);
            }
        }
    }
}
