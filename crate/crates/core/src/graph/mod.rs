//! Models as layer DAGs.

mod partition;

pub use partition::{partition_units, Granularity, ReconstructionUnit};

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::{self, BnMode, Tensor, TensorError};

/// Pseudo node id naming the model input in `inputs` lists.
pub const GRAPH_INPUT: &str = "@input";

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("duplicate node id {0:?}")]
    DuplicateId(String),
    #[error("invalid node id {0:?}")]
    InvalidId(String),
    #[error("node {node:?} references unknown input {input:?}")]
    UnknownInput { node: String, input: String },
    #[error("node {node:?} of kind {kind} expects {expected} inputs, has {actual}")]
    Arity {
        node: String,
        kind: LayerKind,
        expected: usize,
        actual: usize,
    },
    #[error("cycle detected through {0:?}")]
    Cycle(Vec<String>),
    #[error("entry node must be the only consumer of {GRAPH_INPUT}: {0}")]
    Entry(String),
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("node {0:?} does not lie on a path from entry to exit")]
    Disconnected(String),
    #[error("malformed residual structure: {0}")]
    MalformedResidual(String),
    #[error("shape error at node {node:?}: {source}")]
    Shape { node: String, source: TensorError },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerKind {
    Dense,
    Conv2d,
    BatchNorm2d,
    Relu,
    AvgPool2d,
    ResidualAdd,
    Flatten,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv2d => "conv2d",
            LayerKind::BatchNorm2d => "batchnorm2d",
            LayerKind::Relu => "relu",
            LayerKind::AvgPool2d => "avgpool2d",
            LayerKind::ResidualAdd => "residual_add",
            LayerKind::Flatten => "flatten",
        }
    }

    pub fn is_prunable(self) -> bool {
        matches!(self, LayerKind::Dense | LayerKind::Conv2d)
    }

    pub fn arity(self) -> usize {
        if self == LayerKind::ResidualAdd {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "dense" => LayerKind::Dense,
            "conv2d" => LayerKind::Conv2d,
            "batchnorm2d" => LayerKind::BatchNorm2d,
            "relu" => LayerKind::Relu,
            "avgpool2d" => LayerKind::AvgPool2d,
            "residual_add" => LayerKind::ResidualAdd,
            "flatten" => LayerKind::Flatten,
            other => return Err(other.to_string()),
        })
    }
}

/// Layer operation together with its parameters and attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    /// `weight[out×in]`, `bias[out]`.
    Dense {
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    /// `weight[Cout×Cin×kh×kw]`, `bias[Cout]`.
    Conv2d {
        weight: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        padding: usize,
    },
    BatchNorm2d {
        gamma: Tensor<T>,
        beta: Tensor<T>,
        running_mean: Tensor<T>,
        running_var: Tensor<T>,
    },
    Relu,
    AvgPool2d {
        kernel: usize,
    },
    ResidualAdd,
    Flatten,
}

/// Which parameter of a layer a tape variable stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamSlot {
    Weight,
    Bias,
    Gamma,
    Beta,
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense { .. } => LayerKind::Dense,
            Layer::Conv2d { .. } => LayerKind::Conv2d,
            Layer::BatchNorm2d { .. } => LayerKind::BatchNorm2d,
            Layer::Relu => LayerKind::Relu,
            Layer::AvgPool2d { .. } => LayerKind::AvgPool2d,
            Layer::ResidualAdd => LayerKind::ResidualAdd,
            Layer::Flatten => LayerKind::Flatten,
        }
    }

    pub fn weight(&self) -> Option<&Tensor<T>> {
        match self {
            Layer::Dense { weight, .. } | Layer::Conv2d { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn weight_mut(&mut self) -> Option<&mut Tensor<T>> {
        match self {
            Layer::Dense { weight, .. } | Layer::Conv2d { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&Tensor<T>> {
        match self {
            Layer::Dense { bias, .. } | Layer::Conv2d { bias, .. } => Some(bias),
            _ => None,
        }
    }

    pub fn bias_mut(&mut self) -> Option<&mut Tensor<T>> {
        match self {
            Layer::Dense { bias, .. } | Layer::Conv2d { bias, .. } => Some(bias),
            _ => None,
        }
    }

    pub fn param(&self, slot: ParamSlot) -> Option<&Tensor<T>> {
        match (self, slot) {
            (_, ParamSlot::Weight) => self.weight(),
            (_, ParamSlot::Bias) => self.bias(),
            (Layer::BatchNorm2d { gamma, .. }, ParamSlot::Gamma) => Some(gamma),
            (Layer::BatchNorm2d { beta, .. }, ParamSlot::Beta) => Some(beta),
            _ => None,
        }
    }

    pub fn param_mut(&mut self, slot: ParamSlot) -> Option<&mut Tensor<T>> {
        match slot {
            ParamSlot::Weight => self.weight_mut(),
            ParamSlot::Bias => self.bias_mut(),
            ParamSlot::Gamma => match self {
                Layer::BatchNorm2d { gamma, .. } => Some(gamma),
                _ => None,
            },
            ParamSlot::Beta => match self {
                Layer::BatchNorm2d { beta, .. } => Some(beta),
                _ => None,
            },
        }
    }

    /// Trainable slots this layer carries.
    pub fn slots(&self) -> &'static [ParamSlot] {
        match self {
            Layer::Dense { .. } | Layer::Conv2d { .. } => &[ParamSlot::Weight, ParamSlot::Bias],
            Layer::BatchNorm2d { .. } => &[ParamSlot::Gamma, ParamSlot::Beta],
            _ => &[],
        }
    }

    /// Applies the layer to already-computed inputs, without recording.
    pub fn apply(&self, inputs: &[&Tensor<T>]) -> std::result::Result<Tensor<T>, TensorError> {
        let x = inputs[0];
        match self {
            Layer::Dense { weight, bias } => tensor::linear(x, weight, Some(bias)),
            Layer::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => tensor::conv2d(x, weight, Some(bias), *stride, *padding),
            Layer::BatchNorm2d {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                Ok(tensor::batchnorm2d(x, gamma, beta, running_mean, running_var, BnMode::Eval)?.y)
            }
            Layer::Relu => Ok(tensor::relu(x)),
            Layer::AvgPool2d { kernel } => tensor::avgpool2d(x, *kernel),
            Layer::ResidualAdd => tensor::add(x, inputs[1]),
            Layer::Flatten => Ok(tensor::flatten(x)),
        }
    }

    /// Linear part of a prunable layer (no bias): `f(W, X)`.
    pub fn apply_weight_only(
        &self,
        weight: &Tensor<T>,
        x: &Tensor<T>,
    ) -> std::result::Result<Tensor<T>, TensorError> {
        match self {
            Layer::Dense { .. } => tensor::linear(x, weight, None),
            Layer::Conv2d {
                stride, padding, ..
            } => tensor::conv2d(x, weight, None, *stride, *padding),
            _ => Err(TensorError::ShapeMismatch {
                op: "apply_weight_only",
                detail: "layer has no weight".into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode<T> {
    pub id: String,
    pub layer: Layer<T>,
    pub inputs: Vec<String>,
}

impl<T: Scalar> LayerNode<T> {
    pub fn new(id: impl Into<String>, layer: Layer<T>, inputs: &[&str]) -> Self {
        Self {
            id: id.into(),
            layer,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn kind(&self) -> LayerKind {
        self.layer.kind()
    }

    pub fn is_prunable(&self) -> bool {
        self.kind().is_prunable()
    }
}

/// Validated layer DAG with a declared per-sample input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T> {
    nodes: Vec<LayerNode<T>>,
    index: HashMap<String, usize>,
    order: Vec<usize>,
    entry: String,
    exit: String,
    input_shape: Vec<usize>,
}

/// Deterministic Kahn ordering; ties go to the lexicographically smallest id.
pub fn topo_order<T: Scalar>(nodes: &[LayerNode<T>]) -> Result<Vec<String>> {
    let index: HashMap<&str, usize> = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.id.as_str(), i))
        .collect();
    let mut indegree = vec![0usize; nodes.len()];
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for (i, n) in nodes.iter().enumerate() {
        for inp in &n.inputs {
            if inp == GRAPH_INPUT {
                continue;
            }
            let &j = index
                .get(inp.as_str())
                .ok_or_else(|| GraphError::UnknownInput {
                    node: n.id.clone(),
                    input: inp.clone(),
                })?;
            indegree[i] += 1;
            consumers[j].push(i);
        }
    }
    let mut ready: BTreeSet<(&str, usize)> = (0..nodes.len())
        .filter(|&i| indegree[i] == 0)
        .map(|i| (nodes[i].id.as_str(), i))
        .collect();
    let mut out = Vec::with_capacity(nodes.len());
    while let Some(first) = ready.pop_first() {
        let i = first.1;
        out.push(nodes[i].id.clone());
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert((nodes[c].id.as_str(), c));
            }
        }
    }
    if out.len() != nodes.len() {
        let mut stuck: Vec<String> = (0..nodes.len())
            .filter(|&i| indegree[i] > 0)
            .map(|i| nodes[i].id.clone())
            .collect();
        stuck.sort();
        return Err(GraphError::Cycle(stuck));
    }
    Ok(out)
}

/// Recorded forward over (part of) a graph.
#[derive(Debug, Default)]
pub struct Trace {
    /// Output variable of every traced node.
    pub outputs: HashMap<String, Var>,
    /// Tape variables of the trainable parameters.
    pub params: Vec<(String, ParamSlot, Var)>,
}

/// Updated running statistics from a training-mode forward.
pub type BnUpdates<T> = Vec<(String, Tensor<T>, Tensor<T>)>;

impl<T: Scalar> ModelGraph<T> {
    pub fn new(
        input_shape: Vec<usize>,
        nodes: Vec<LayerNode<T>>,
        entry: impl Into<String>,
        exit: impl Into<String>,
    ) -> Result<Self> {
        let entry = entry.into();
        let exit = exit.into();
        let mut index = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if n.id.is_empty()
                || n.id.starts_with('@')
                || n.id.chars().any(|c| c.is_whitespace() || c == ',')
            {
                return Err(GraphError::InvalidId(n.id.clone()));
            }
            if index.insert(n.id.clone(), i).is_some() {
                return Err(GraphError::DuplicateId(n.id.clone()));
            }
            let expected = n.kind().arity();
            if n.inputs.len() != expected {
                return Err(GraphError::Arity {
                    node: n.id.clone(),
                    kind: n.kind(),
                    expected,
                    actual: n.inputs.len(),
                });
            }
        }
        for id in [&entry, &exit] {
            if !index.contains_key(id) {
                return Err(GraphError::UnknownNode(id.clone()));
            }
        }
        let input_consumers: Vec<&str> = nodes
            .iter()
            .filter(|n| n.inputs.iter().any(|i| i == GRAPH_INPUT))
            .map(|n| n.id.as_str())
            .collect();
        if input_consumers != [entry.as_str()] {
            return Err(GraphError::Entry(format!(
                "consumers are {:?}, entry is {:?}",
                input_consumers, entry
            )));
        }
        let order: Vec<usize> = topo_order(&nodes)?.iter().map(|id| index[id]).collect();
        let graph = Self {
            nodes,
            index,
            order,
            entry,
            exit,
            input_shape,
        };
        graph.check_connectivity()?;
        // shape inference doubles as parameter-shape validation
        let mut shape = vec![1];
        shape.extend_from_slice(&graph.input_shape);
        let probe = Tensor::zeros(&shape);
        graph.forward(&probe)?;
        Ok(graph)
    }

    fn check_connectivity(&self) -> Result<()> {
        // forward reachability from entry
        let mut reach = vec![false; self.nodes.len()];
        reach[self.index[&self.entry]] = true;
        for &i in &self.order {
            if self.nodes[i]
                .inputs
                .iter()
                .any(|p| p != GRAPH_INPUT && reach[self.index[p]])
            {
                reach[i] = true;
            }
        }
        // backward reachability from exit
        let mut coreach = vec![false; self.nodes.len()];
        coreach[self.index[&self.exit]] = true;
        for &i in self.order.iter().rev() {
            if coreach[i] {
                for p in &self.nodes[i].inputs {
                    if p != GRAPH_INPUT {
                        coreach[self.index[p]] = true;
                    }
                }
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !reach[i] || !coreach[i] {
                return Err(GraphError::Disconnected(n.id.clone()));
            }
        }
        Ok(())
    }

    pub fn entry(&self) -> &str {
        &self.entry
    }

    pub fn exit(&self) -> &str {
        &self.exit
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: &str) -> Option<&LayerNode<T>> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    /// Mutable access to a layer's parameters. The layer kind must not change.
    pub fn layer_mut(&mut self, id: &str) -> Option<&mut Layer<T>> {
        self.index.get(id).map(|&i| &mut self.nodes[i].layer)
    }

    /// Nodes in declaration order.
    pub fn nodes(&self) -> &[LayerNode<T>] {
        &self.nodes
    }

    /// Node ids in topological order.
    pub fn topo_order(&self) -> Vec<&str> {
        self.order
            .iter()
            .map(|&i| self.nodes[i].id.as_str())
            .collect()
    }

    pub fn topo_position(&self, id: &str) -> Option<usize> {
        let i = *self.index.get(id)?;
        self.order.iter().position(|&j| j == i)
    }

    /// Prunable node ids in topological order.
    pub fn prunable_ids(&self) -> Vec<&str> {
        self.order
            .iter()
            .map(|&i| &self.nodes[i])
            .filter(|n| n.is_prunable())
            .map(|n| n.id.as_str())
            .collect()
    }

    /// Nodes consuming `id`'s output, in topological order.
    pub fn consumers(&self, id: &str) -> Vec<&str> {
        self.order
            .iter()
            .map(|&i| &self.nodes[i])
            .filter(|n| n.inputs.iter().any(|p| p == id))
            .map(|n| n.id.as_str())
            .collect()
    }

    /// Batched forward pass (batch norm in eval mode). Returns every node's activation.
    pub fn forward(&self, input: &Tensor<T>) -> Result<HashMap<String, Tensor<T>>> {
        if input.shape().get(1..) != Some(self.input_shape.as_slice()) {
            return Err(GraphError::Shape {
                node: GRAPH_INPUT.into(),
                source: TensorError::ShapeMismatch {
                    op: "forward",
                    detail: format!(
                        "input {:?}, declared per-sample {:?}",
                        input.shape(),
                        self.input_shape
                    ),
                },
            });
        }
        let mut acts: HashMap<String, Tensor<T>> = HashMap::with_capacity(self.nodes.len());
        for &i in &self.order {
            let node = &self.nodes[i];
            let ins: Vec<&Tensor<T>> = node
                .inputs
                .iter()
                .map(|p| if p == GRAPH_INPUT { input } else { &acts[p] })
                .collect();
            let y = node.layer.apply(&ins).map_err(|source| GraphError::Shape {
                node: node.id.clone(),
                source,
            })?;
            acts.insert(node.id.clone(), y);
        }
        Ok(acts)
    }

    /// Output of the exit node only.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut acts = self.forward(input)?;
        Ok(acts.remove(&self.exit).expect("exit activation"))
    }

    /// Records the given nodes (which must be in topological order) on `tape`.
    ///
    /// `inputs` supplies variables for every predecessor outside `members`
    /// (use [`GRAPH_INPUT`] for the model input). Parameters for which
    /// `trainable` returns true are registered as tape parameters, the rest
    /// as constants.
    pub fn trace(
        &self,
        tape: &mut Tape<T>,
        members: &[&str],
        inputs: &HashMap<String, Var>,
        trainable: impl Fn(&str, ParamSlot) -> bool,
        bn_mode: BnMode,
    ) -> Result<(Trace, BnUpdates<T>)> {
        let mut trace = Trace::default();
        let mut updates = Vec::new();
        for &id in members {
            let node = self
                .node(id)
                .ok_or_else(|| GraphError::UnknownNode(id.to_string()))?;
            let ins: Vec<Var> = node
                .inputs
                .iter()
                .map(|p| {
                    trace
                        .outputs
                        .get(p)
                        .or_else(|| inputs.get(p))
                        .copied()
                        .ok_or_else(|| GraphError::UnknownInput {
                            node: id.to_string(),
                            input: p.clone(),
                        })
                })
                .collect::<Result<_>>()?;
            let mut leaf = |tape: &mut Tape<T>, slot: ParamSlot, value: &Tensor<T>| {
                if trainable(id, slot) {
                    let v = tape.param(value.clone());
                    trace.params.push((id.to_string(), slot, v));
                    v
                } else {
                    tape.constant(value.clone())
                }
            };
            let wrap = |e: AutodiffError| match e {
                AutodiffError::Tensor(source) => GraphError::Shape {
                    node: id.to_string(),
                    source,
                },
                other => GraphError::Autodiff(other),
            };
            let out = match &node.layer {
                Layer::Dense { weight, bias } => {
                    let w = leaf(tape, ParamSlot::Weight, weight);
                    let b = leaf(tape, ParamSlot::Bias, bias);
                    tape.linear(ins[0], w, Some(b)).map_err(wrap)?
                }
                Layer::Conv2d {
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let w = leaf(tape, ParamSlot::Weight, weight);
                    let b = leaf(tape, ParamSlot::Bias, bias);
                    tape.conv2d(ins[0], w, Some(b), *stride, *padding)
                        .map_err(wrap)?
                }
                Layer::BatchNorm2d {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    let g = leaf(tape, ParamSlot::Gamma, gamma);
                    let b = leaf(tape, ParamSlot::Beta, beta);
                    let (y, running) = tape
                        .batchnorm2d(ins[0], g, b, running_mean, running_var, bn_mode)
                        .map_err(wrap)?;
                    if let Some((m, v)) = running {
                        updates.push((id.to_string(), m, v));
                    }
                    y
                }
                Layer::Relu => tape.relu(ins[0]).map_err(wrap)?,
                Layer::AvgPool2d { kernel } => tape.avgpool2d(ins[0], *kernel).map_err(wrap)?,
                Layer::ResidualAdd => tape.add(ins[0], ins[1]).map_err(wrap)?,
                Layer::Flatten => tape.flatten(ins[0]).map_err(wrap)?,
            };
            trace.outputs.insert(id.to_string(), out);
        }
        Ok((trace, updates))
    }

    /// Records a whole-model forward on `tape`.
    pub fn trace_full(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        trainable: impl Fn(&str, ParamSlot) -> bool,
        bn_mode: BnMode,
    ) -> Result<(Trace, BnUpdates<T>)> {
        let members = self.topo_order();
        let inputs = HashMap::from([(GRAPH_INPUT.to_string(), input)]);
        self.trace(tape, &members, &inputs, trainable, bn_mode)
    }

    /// Writes updated batch-norm running statistics back into the graph.
    pub fn apply_bn_updates(&mut self, updates: BnUpdates<T>) {
        for (id, m, v) in updates {
            if let Some(Layer::BatchNorm2d {
                running_mean,
                running_var,
                ..
            }) = self.layer_mut(&id)
            {
                *running_mean = m;
                *running_var = v;
            }
        }
    }

    /// Total number of prunable weight elements.
    pub fn prunable_count(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| n.layer.weight())
            .map(Tensor::numel)
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        let nodes = self
            .nodes
            .iter()
            .map(|n| LayerNode {
                id: n.id.clone(),
                inputs: n.inputs.clone(),
                layer: match &n.layer {
                    Layer::Dense { weight, bias } => Layer::Dense {
                        weight: weight.cast(),
                        bias: bias.cast(),
                    },
                    Layer::Conv2d {
                        weight,
                        bias,
                        stride,
                        padding,
                    } => Layer::Conv2d {
                        weight: weight.cast(),
                        bias: bias.cast(),
                        stride: *stride,
                        padding: *padding,
                    },
                    Layer::BatchNorm2d {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    } => Layer::BatchNorm2d {
                        gamma: gamma.cast(),
                        beta: beta.cast(),
                        running_mean: running_mean.cast(),
                        running_var: running_var.cast(),
                    },
                    Layer::Relu => Layer::Relu,
                    Layer::AvgPool2d { kernel } => Layer::AvgPool2d { kernel: *kernel },
                    Layer::ResidualAdd => Layer::ResidualAdd,
                    Layer::Flatten => Layer::Flatten,
                },
            })
            .collect();
        ModelGraph {
            nodes,
            index: self.index.clone(),
            order: self.order.clone(),
            entry: self.entry.clone(),
            exit: self.exit.clone(),
            input_shape: self.input_shape.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relu_chain(ids: &[&str]) -> Vec<LayerNode<f64>> {
        let mut prev = GRAPH_INPUT;
        let mut out = Vec::new();
        for &id in ids {
            out.push(LayerNode::new(id, Layer::Relu, &[prev]));
            prev = id;
        }
        out
    }

    #[test]
    fn single_node_order() {
        let nodes = relu_chain(&["a"]);
        assert_eq!(topo_order(&nodes).unwrap(), vec!["a"]);
    }

    #[test]
    fn chain_order_ignores_declaration_order() {
        let mut nodes = relu_chain(&["c", "b", "a"]);
        nodes.reverse();
        assert_eq!(topo_order(&nodes).unwrap(), vec!["c", "b", "a"]);
    }

    #[test]
    fn diamond_breaks_ties_lexicographically() {
        let nodes = vec![
            LayerNode::<f64>::new("d", Layer::ResidualAdd, &["c", "b"]),
            LayerNode::new("c", Layer::Relu, &["a"]),
            LayerNode::new("b", Layer::Relu, &["a"]),
            LayerNode::new("a", Layer::Relu, &[GRAPH_INPUT]),
        ];
        assert_eq!(topo_order(&nodes).unwrap(), vec!["a", "b", "c", "d"]);
        let g = ModelGraph::new(vec![3], nodes, "a", "d").unwrap();
        assert_eq!(g.consumers("a"), vec!["b", "c"]);
    }

    #[test]
    fn cycle_is_detected() {
        let nodes = vec![
            LayerNode::<f64>::new("a", Layer::Relu, &["b"]),
            LayerNode::new("b", Layer::Relu, &["a"]),
        ];
        assert!(matches!(topo_order(&nodes), Err(GraphError::Cycle(_))));
    }

    #[test]
    fn identity_conv_graph() {
        let nodes = vec![LayerNode::new(
            "c",
            Layer::Conv2d {
                weight: Tensor::ones(&[1, 1, 1, 1]),
                bias: Tensor::zeros(&[1]),
                stride: 1,
                padding: 0,
            },
            &[GRAPH_INPUT],
        )];
        let g = ModelGraph::new(vec![1, 3, 3], nodes, "c", "c").unwrap();
        let x = Tensor::from_fn(&[2, 1, 3, 3], |i| i as f64 * 0.1);
        assert_eq!(g.predict(&x).unwrap(), x);
    }

    #[test]
    fn rejects_dangling_and_bad_shapes() {
        let nodes = vec![
            LayerNode::<f64>::new("a", Layer::Relu, &[GRAPH_INPUT]),
            LayerNode::new("b", Layer::Relu, &["a"]),
            LayerNode::new("dangling", Layer::Relu, &["a"]),
        ];
        assert!(matches!(
            ModelGraph::new(vec![2], nodes, "a", "b"),
            Err(GraphError::Disconnected(_))
        ));

        let nodes = vec![LayerNode::new(
            "fc",
            Layer::Dense {
                weight: Tensor::<f64>::zeros(&[2, 5]),
                bias: Tensor::zeros(&[2]),
            },
            &[GRAPH_INPUT],
        )];
        assert!(matches!(
            ModelGraph::new(vec![4], nodes, "fc", "fc"),
            Err(GraphError::Shape { .. })
        ));
    }

    #[test]
    fn forward_keys_every_node() {
        let nodes = relu_chain(&["a", "b", "c"]);
        let g = ModelGraph::new(vec![2], nodes, "a", "c").unwrap();
        let acts = g
            .forward(&Tensor::new(vec![1, 2], vec![-1.0, 2.0]).unwrap())
            .unwrap();
        assert_eq!(acts.len(), g.len());
        assert!(g.forward(&Tensor::zeros(&[1, 3])).is_err());
    }
}
