//! Splitting a model into reconstruction units.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use super::{GraphError, LayerKind, ModelGraph, Result, GRAPH_INPUT};
use crate::scalar::Scalar;

/// Size of the subgraph optimized jointly during reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Granularity {
    /// One prunable layer.
    Single,
    /// A prunable layer with its trailing batch norm and ReLU.
    LayerWise,
    /// A residual block; layer-wise outside residual blocks.
    BlockWise,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [
        Granularity::Single,
        Granularity::LayerWise,
        Granularity::BlockWise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Single => "single",
            Granularity::LayerWise => "layer",
            Granularity::BlockWise => "block",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "single" => Ok(Granularity::Single),
            "layer" | "layer_wise" | "layer-wise" => Ok(Granularity::LayerWise),
            "block" | "block_wise" | "block-wise" => Ok(Granularity::BlockWise),
            other => Err(format!(
                "unknown granularity {other:?} (expected single, layer or block)"
            )),
        }
    }
}

/// Connected subgraph optimized as one piece.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReconstructionUnit {
    /// Member node ids in topological order.
    pub members: Vec<String>,
    /// External predecessors feeding the members (may include [`GRAPH_INPUT`]).
    pub inputs: Vec<String>,
    /// The single member whose activation leaves the unit.
    pub output: String,
}

impl ReconstructionUnit {
    pub fn contains(&self, id: &str) -> bool {
        self.members.iter().any(|m| m == id)
    }

    /// Prunable members, in topological order.
    pub fn prunable_members<'a, T: Scalar>(&'a self, graph: &ModelGraph<T>) -> Vec<&'a str> {
        self.members
            .iter()
            .filter(|m| graph.node(m).is_some_and(|n| n.is_prunable()))
            .map(String::as_str)
            .collect()
    }
}

pub fn partition_units<T: Scalar>(
    graph: &ModelGraph<T>,
    granularity: Granularity,
) -> Result<Vec<ReconstructionUnit>> {
    let blocks = match granularity {
        Granularity::BlockWise => residual_blocks(graph)?,
        _ => Vec::new(),
    };
    let in_block: HashSet<&str> = blocks.iter().flatten().map(String::as_str).collect();

    let mut groups: Vec<Vec<String>> = blocks
        .iter()
        .filter(|b| {
            b.iter()
                .any(|m| graph.node(m).is_some_and(|n| n.is_prunable()))
        })
        .cloned()
        .collect();
    for p in graph.prunable_ids() {
        if in_block.contains(p) {
            continue;
        }
        let group = match granularity {
            Granularity::Single => vec![p.to_string()],
            _ => layer_group(graph, p, &in_block),
        };
        groups.push(group);
    }
    groups.sort_by_key(|g| g.iter().filter_map(|m| graph.topo_position(m)).min());
    groups.into_iter().map(|g| make_unit(graph, g)).collect()
}

/// `P (→BN)(→ReLU)` along sole-consumer links.
fn layer_group<T: Scalar>(
    graph: &ModelGraph<T>,
    start: &str,
    blocked: &HashSet<&str>,
) -> Vec<String> {
    let mut group = vec![start.to_string()];
    let mut cur = start.to_string();
    for want in [LayerKind::BatchNorm2d, LayerKind::Relu] {
        let cons = graph.consumers(&cur);
        if cons.len() != 1 || blocked.contains(cons[0]) || cur == graph.exit() {
            break;
        }
        let next = graph.node(cons[0]).expect("consumer exists");
        if next.kind() == want {
            group.push(next.id.clone());
            cur = next.id.clone();
        }
    }
    group
}

fn ancestors<T: Scalar>(graph: &ModelGraph<T>, id: &str) -> HashSet<String> {
    let mut seen = HashSet::new();
    let mut stack = vec![id.to_string()];
    while let Some(n) = stack.pop() {
        if n == GRAPH_INPUT || !seen.insert(n.clone()) {
            continue;
        }
        stack.extend(graph.node(&n).expect("node exists").inputs.iter().cloned());
    }
    seen
}

/// Residual blocks as member lists in topological order. A block spans
/// everything strictly after its fan-out node up to and including the
/// matching `residual_add`.
fn residual_blocks<T: Scalar>(graph: &ModelGraph<T>) -> Result<Vec<Vec<String>>> {
    let mut blocks = Vec::new();
    let mut fan_outs_used: BTreeSet<String> = BTreeSet::new();
    let mut claimed: HashSet<String> = HashSet::new();
    for id in graph.topo_order() {
        let node = graph.node(id).expect("node exists");
        if node.kind() != LayerKind::ResidualAdd {
            continue;
        }
        let (a, b) = (&node.inputs[0], &node.inputs[1]);
        let anc_a = ancestors(graph, a);
        let anc_b = ancestors(graph, b);
        let fan_out = anc_a
            .intersection(&anc_b)
            .max_by_key(|n| graph.topo_position(n))
            .cloned()
            .unwrap_or_else(|| GRAPH_INPUT.to_string());
        let before: HashSet<String> = if fan_out == GRAPH_INPUT {
            HashSet::new()
        } else {
            ancestors(graph, &fan_out)
        };
        let mut members: Vec<String> = anc_a
            .union(&anc_b)
            .filter(|n| !before.contains(*n))
            .cloned()
            .collect();
        members.push(id.to_string());
        members.sort_by_key(|m| graph.topo_position(m));

        let set: HashSet<&str> = members.iter().map(String::as_str).collect();
        for m in &members {
            for p in &graph.node(m).expect("member exists").inputs {
                if !set.contains(p.as_str()) && *p != fan_out {
                    return Err(GraphError::MalformedResidual(format!(
                        "block ending at {id:?} is also fed by {p:?} besides fan-out {fan_out:?}"
                    )));
                }
            }
            if m != id && graph.consumers(m).iter().any(|c| !set.contains(c)) {
                return Err(GraphError::MalformedResidual(format!(
                    "activation of {m:?} escapes the block ending at {id:?}"
                )));
            }
            if !claimed.insert(m.clone()) {
                return Err(GraphError::MalformedResidual(format!(
                    "{m:?} belongs to overlapping blocks"
                )));
            }
        }
        fan_outs_used.insert(fan_out);
        blocks.push(members);
    }
    // every fan-out must be closed by a residual add
    let input_fanout = graph
        .nodes()
        .iter()
        .filter(|n| n.inputs.iter().any(|p| p == GRAPH_INPUT))
        .count();
    if input_fanout > 1 && !fan_outs_used.contains(GRAPH_INPUT) {
        return Err(GraphError::MalformedResidual(format!(
            "{GRAPH_INPUT} fans out with no matching add"
        )));
    }
    for id in graph.topo_order() {
        let fanout = graph.consumers(id).len();
        if fanout > 1 && !fan_outs_used.contains(id) {
            return Err(GraphError::MalformedResidual(format!(
                "{id:?} fans out with no matching add"
            )));
        }
    }
    Ok(blocks)
}

fn make_unit<T: Scalar>(graph: &ModelGraph<T>, members: Vec<String>) -> Result<ReconstructionUnit> {
    let set: HashSet<&str> = members.iter().map(String::as_str).collect();
    let mut outputs = Vec::new();
    let mut inputs: Vec<String> = Vec::new();
    for m in &members {
        let escapes = m == graph.exit() || graph.consumers(m).iter().any(|c| !set.contains(c));
        if escapes {
            outputs.push(m.clone());
        }
        for p in &graph.node(m).expect("member exists").inputs {
            if !set.contains(p.as_str()) && !inputs.contains(p) {
                inputs.push(p.clone());
            }
        }
    }
    if outputs.len() != 1 {
        return Err(GraphError::MalformedResidual(format!(
            "unit {members:?} exposes {} activations ({outputs:?})",
            outputs.len()
        )));
    }
    inputs.sort_by_key(|p| {
        if p == GRAPH_INPUT {
            None
        } else {
            graph.topo_position(p)
        }
    });
    Ok(ReconstructionUnit {
        members,
        inputs,
        output: outputs.remove(0),
    })
}
