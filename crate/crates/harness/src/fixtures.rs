//! The fixture zoo: three architecture families at three sizes, with a
//! classification or denoising head.

use std::fmt;
use std::str::FromStr;

use postprune::graph::GRAPH_INPUT;
use postprune::rng::rng;
use postprune::{Layer, LayerNode, ModelGraph, Tensor};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{DataSpec, Task};
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Mlp,
    /// CONV-BN-ReLU chains.
    PlainConv,
    /// Stem plus two residual blocks.
    ResCnn,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Mlp, Family::PlainConv, Family::ResCnn];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Mlp => "mlp",
            Family::PlainConv => "plainconv",
            Family::ResCnn => "rescnn",
        }
    }

    fn width(self, size: Size) -> usize {
        let i = size as usize;
        match self {
            Family::Mlp => [16, 32, 48][i],
            Family::PlainConv | Family::ResCnn => [4, 6, 8][i],
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown family {s:?} (expected mlp, plainconv or rescnn)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Size {
    S,
    M,
    L,
}

impl Size {
    pub const ALL: [Size; 3] = [Size::S, Size::M, Size::L];

    pub fn as_str(self) -> &'static str {
        match self {
            Size::S => "s",
            Size::M => "m",
            Size::L => "l",
        }
    }
}

impl fmt::Display for Size {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Size {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Size::ALL
            .into_iter()
            .find(|z| z.as_str() == s)
            .ok_or_else(|| format!("unknown size {s:?} (expected s, m or l)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FixtureSpec {
    pub family: Family,
    pub size: Size,
    pub task: Task,
}

impl fmt::Display for FixtureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}", self.family, self.size, self.task)
    }
}

impl FromStr for FixtureSpec {
    type Err = String;

    /// `<family>-<size>-<task>`, e.g. `rescnn-m-cls`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split('-').collect();
        let [family, size, task] = parts.as_slice() else {
            return Err(format!("fixture name {s:?} is not <family>-<size>-<task>"));
        };
        Ok(Self {
            family: family.parse()?,
            size: size.parse()?,
            task: task.parse()?,
        })
    }
}

impl FixtureSpec {
    /// The default zoo: every family and size for classification, plus the
    /// medium size of each family for denoising.
    pub fn zoo() -> Vec<FixtureSpec> {
        let mut out = Vec::new();
        for family in Family::ALL {
            for size in Size::ALL {
                out.push(FixtureSpec {
                    family,
                    size,
                    task: Task::Cls,
                });
            }
        }
        for family in Family::ALL {
            out.push(FixtureSpec {
                family,
                size: Size::M,
                task: Task::Den,
            });
        }
        out
    }

    /// Untrained model with He-normal weights.
    pub fn build(&self, data: &DataSpec, seed: u64) -> Result<ModelGraph> {
        if data.task != self.task {
            return Err(HarnessError::Usage(format!(
                "fixture {self} needs a {} dataset, got {}",
                self.task, data.task
            )));
        }
        let mut b = Builder {
            rng: rng(seed),
            nodes: Vec::new(),
        };
        let w = self.family.width(self.size);
        let side = data.side;
        let px = side * side;
        let out_dim = match self.task {
            Task::Cls => data.classes,
            Task::Den => px,
        };
        match (self.family, self.task) {
            (Family::Mlp, _) => {
                b.push("flat", Layer::Flatten, &[GRAPH_INPUT]);
                let x = b.dense_relu("fc1", px, w, "flat");
                let x = b.dense_relu("fc2", w, w, &x);
                b.dense("fc3", w, out_dim, &x);
            }
            (Family::PlainConv, Task::Cls) => {
                let x = b.cbr("c1", 1, w, GRAPH_INPUT);
                let x = b.cbr("c2", w, 2 * w, &x);
                b.push("pool1", Layer::AvgPool2d { kernel: 2 }, &[&x]);
                let x = b.cbr("c3", 2 * w, 2 * w, "pool1");
                b.push("pool2", Layer::AvgPool2d { kernel: 2 }, &[&x]);
                b.push("flat", Layer::Flatten, &["pool2"]);
                b.dense("fc", 2 * w * px / 16, out_dim, "flat");
            }
            (Family::PlainConv, Task::Den) => {
                let x = b.cbr("c1", 1, w, GRAPH_INPUT);
                let x = b.cbr("c2", w, w, &x);
                b.conv("out", w, 1, 3, &x);
            }
            (Family::ResCnn, Task::Cls) => {
                let x = b.cbr("stem", 1, w, GRAPH_INPUT);
                b.push("pool1", Layer::AvgPool2d { kernel: 2 }, &[&x]);
                let x = b.residual("b1", w, "pool1");
                let x = b.residual("b2", w, &x);
                b.push("pool2", Layer::AvgPool2d { kernel: 2 }, &[&x]);
                b.push("flat", Layer::Flatten, &["pool2"]);
                b.dense("fc", w * px / 16, out_dim, "flat");
            }
            (Family::ResCnn, Task::Den) => {
                let x = b.cbr("stem", 1, w, GRAPH_INPUT);
                let x = b.residual("b1", w, &x);
                let x = b.residual("b2", w, &x);
                b.conv("out", w, 1, 3, &x);
            }
        }
        let entry = b.nodes[0].id.clone();
        let exit = b.nodes.last().expect("nodes").id.clone();
        Ok(ModelGraph::new(
            data.sample_shape().to_vec(),
            b.nodes,
            entry,
            exit,
        )?)
    }
}

struct Builder {
    rng: ChaCha8Rng,
    nodes: Vec<LayerNode>,
}

impl Builder {
    fn push(&mut self, id: &str, layer: Layer, inputs: &[&str]) -> String {
        self.nodes.push(LayerNode::new(id, layer, inputs));
        id.to_string()
    }

    fn he(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let sd = (2.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            sd * z
        })
    }

    fn dense(&mut self, id: &str, inp: usize, out: usize, from: &str) -> String {
        let weight = self.he(&[out, inp], inp);
        self.push(
            id,
            Layer::Dense {
                weight,
                bias: Tensor::zeros(&[out]),
            },
            &[from],
        )
    }

    fn dense_relu(&mut self, id: &str, inp: usize, out: usize, from: &str) -> String {
        let x = self.dense(id, inp, out, from);
        self.push(&format!("{id}_relu"), Layer::Relu, &[&x])
    }

    fn conv(&mut self, id: &str, inp: usize, out: usize, k: usize, from: &str) -> String {
        let weight = self.he(&[out, inp, k, k], inp * k * k);
        let layer = Layer::Conv2d {
            weight,
            bias: Tensor::zeros(&[out]),
            stride: 1,
            padding: k / 2,
        };
        self.push(id, layer, &[from])
    }

    fn bn(&mut self, id: &str, c: usize, from: &str) -> String {
        let layer = Layer::BatchNorm2d {
            gamma: Tensor::ones(&[c]),
            beta: Tensor::zeros(&[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::ones(&[c]),
        };
        self.push(id, layer, &[from])
    }

    /// conv 3×3 → batch norm → ReLU; returns the ReLU id.
    fn cbr(&mut self, id: &str, inp: usize, out: usize, from: &str) -> String {
        let x = self.conv(id, inp, out, 3, from);
        let x = self.bn(&format!("{id}_bn"), out, &x);
        self.push(&format!("{id}_relu"), Layer::Relu, &[&x])
    }

    fn residual(&mut self, id: &str, c: usize, from: &str) -> String {
        let x = self.cbr(&format!("{id}_c1"), c, c, from);
        let x = self.conv(&format!("{id}_c2"), c, c, 3, &x);
        let x = self.bn(&format!("{id}_c2_bn"), c, &x);
        let x = self.push(&format!("{id}_add"), Layer::ResidualAdd, &[&x, from]);
        self.push(&format!("{id}_relu"), Layer::Relu, &[&x])
    }
}
