//! Validated operator DAG.
//!
//! Values carry per-sample shapes with the batch dimension stripped:
//! `[C, H, W]` for feature maps and `[F]` for flat vectors. Nodes are stored
//! in topological order; the builder only accepts a node once all of its
//! inputs exist, so cycles cannot be represented.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ValueId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WeightId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Weight {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: WeightId,
    pub bias: Option<WeightId>,
    pub strides: [usize; 2],
    /// top, left, bottom, right
    pub pads: [usize; 4],
    pub dilations: [usize; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pool {
    pub kernel: [usize; 2],
    pub strides: [usize; 2],
    pub pads: [usize; 4],
    pub count_include_pad: bool,
}

/// Fully connected layer; the weight is always stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gemm {
    pub weight: WeightId,
    pub bias: Option<WeightId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub scale: WeightId,
    pub bias: WeightId,
    pub mean: WeightId,
    pub var: WeightId,
    pub epsilon: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Conv(Conv),
    Relu,
    MaxPool(Pool),
    AveragePool(Pool),
    GlobalAveragePool,
    Gemm(Gemm),
    Add,
    Concat,
    Flatten,
    BatchNorm(BatchNorm),
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Conv(_) => "Conv",
            Op::Relu => "Relu",
            Op::MaxPool(_) => "MaxPool",
            Op::AveragePool(_) => "AveragePool",
            Op::GlobalAveragePool => "GlobalAveragePool",
            Op::Gemm(_) => "Gemm",
            Op::Add => "Add",
            Op::Concat => "Concat",
            Op::Flatten => "Flatten",
            Op::BatchNorm(_) => "BatchNormalization",
        }
    }

    fn weights(&self) -> Vec<WeightId> {
        match self {
            Op::Conv(c) => std::iter::once(c.weight).chain(c.bias).collect(),
            Op::Gemm(g) => std::iter::once(g.weight).chain(g.bias).collect(),
            Op::BatchNorm(b) => vec![b.scale, b.bias, b.mean, b.var],
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<ValueId>,
    pub output: ValueId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueInfo {
    pub name: String,
    pub shape: Vec<usize>,
    /// Index of the producing node; `None` for the graph input.
    pub producer: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    values: Vec<ValueInfo>,
    nodes: Vec<Node>,
    weights: Vec<Weight>,
    value_index: BTreeMap<String, ValueId>,
    input: ValueId,
    output: ValueId,
}

impl ModelGraph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn values(&self) -> &[ValueInfo] {
        &self.values
    }

    pub fn weights(&self) -> &[Weight] {
        &self.weights
    }

    pub fn weight(&self, id: WeightId) -> &Weight {
        &self.weights[id.0]
    }

    pub fn value(&self, id: ValueId) -> &ValueInfo {
        &self.values[id.0]
    }

    pub fn input(&self) -> ValueId {
        self.input
    }

    pub fn output(&self) -> ValueId {
        self.output
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.values[self.input.0].shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.values[self.output.0].shape
    }

    /// Resolve an activation name. Weight names are rejected explicitly.
    pub fn value_id(&self, name: &str) -> Result<ValueId> {
        if let Some(&id) = self.value_index.get(name) {
            return Ok(id);
        }
        if self.weights.iter().any(|w| w.name == name) {
            return Err(Error::NotAnActivation(name.to_string()));
        }
        Err(Error::UnknownValue(name.to_string()))
    }

    /// Indices of nodes consuming `value`, in node order.
    pub fn consumers(&self, value: ValueId) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.inputs.contains(&value))
            .map(|(i, _)| i)
            .collect()
    }

    /// `ancestor == value` or `value` is reachable from `ancestor`.
    pub fn depends_on(&self, value: ValueId, ancestor: ValueId) -> bool {
        self.downstream_of(ancestor)[value.0]
    }

    /// Marks every value reachable from `start` (inclusive).
    pub fn downstream_of(&self, start: ValueId) -> Vec<bool> {
        let mut reach = vec![false; self.values.len()];
        reach[start.0] = true;
        for node in &self.nodes {
            if node.inputs.iter().any(|v| reach[v.0]) {
                reach[node.output.0] = true;
            }
        }
        reach
    }

    /// Marks every value that `end` depends on (inclusive).
    pub fn upstream_of(&self, end: ValueId) -> Vec<bool> {
        let mut reach = vec![false; self.values.len()];
        reach[end.0] = true;
        for node in self.nodes.iter().rev() {
            if reach[node.output.0] {
                for v in &node.inputs {
                    reach[v.0] = true;
                }
            }
        }
        reach
    }

    /// Copy of the graph with every BatchNorm that directly follows a
    /// Conv/Gemm (whose output feeds nothing else) folded into that op.
    pub fn fold_batch_norms(&self) -> Result<ModelGraph> {
        let mut fold_into: BTreeMap<usize, usize> = BTreeMap::new(); // producer -> bn node
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::BatchNorm(_) = node.op {
                let src = node.inputs[0];
                let Some(p) = self.values[src.0].producer else {
                    continue;
                };
                let foldable = matches!(self.nodes[p].op, Op::Conv(_) | Op::Gemm(_))
                    && self.consumers(src).len() == 1
                    && src != self.output;
                if foldable {
                    fold_into.insert(p, i);
                }
            }
        }
        let skipped: Vec<usize> = fold_into.values().copied().collect();

        let input = &self.values[self.input.0];
        let mut b = GraphBuilder::new(&input.name, input.shape.clone());
        let mut remap: BTreeMap<WeightId, WeightId> = BTreeMap::new();
        let mut copy_weight = |b: &mut GraphBuilder, id: WeightId| -> WeightId {
            *remap.entry(id).or_insert_with(|| {
                let w = &self.weights[id.0];
                b.weight(&w.name, w.shape.clone(), w.data.clone())
            })
        };

        for (i, node) in self.nodes.iter().enumerate() {
            if skipped.contains(&i) {
                continue;
            }
            let inputs: Vec<&str> = node
                .inputs
                .iter()
                .map(|v| self.values[v.0].name.as_str())
                .collect();
            if let Some(&bn_idx) = fold_into.get(&i) {
                let Op::BatchNorm(bn) = &self.nodes[bn_idx].op else {
                    unreachable!()
                };
                let out_name = &self.values[self.nodes[bn_idx].output.0].name;
                let (factor, shift) = bn_affine(self, bn);
                let (weight, bias) = match &node.op {
                    Op::Conv(c) => (c.weight, c.bias),
                    Op::Gemm(g) => (g.weight, g.bias),
                    _ => unreachable!(),
                };
                let w = &self.weights[weight.0];
                let per_out = w.data.len() / w.shape[0];
                let data: Vec<f32> = w
                    .data
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| (v as f64 * factor[j / per_out]) as f32)
                    .collect();
                let old_bias = bias.map(|id| self.weights[id.0].data.clone());
                let new_bias: Vec<f32> = (0..w.shape[0])
                    .map(|o| {
                        let b0 = old_bias.as_ref().map_or(0.0, |d| d[o] as f64);
                        (b0 * factor[o] + shift[o]) as f32
                    })
                    .collect();
                let wid = b.weight(&format!("{}.folded", w.name), w.shape.clone(), data);
                let bid = b.weight(&format!("{}.folded_bias", node.name), vec![w.shape[0]], new_bias);
                let op = match &node.op {
                    Op::Conv(c) => Op::Conv(Conv {
                        weight: wid,
                        bias: Some(bid),
                        ..c.clone()
                    }),
                    _ => Op::Gemm(Gemm {
                        weight: wid,
                        bias: Some(bid),
                    }),
                };
                b.node(&node.name, op, &inputs, out_name)?;
                continue;
            }
            let op = remap_weights(&node.op, |id| copy_weight(&mut b, id));
            b.node(&node.name, op, &inputs, &self.values[node.output.0].name)?;
        }
        b.finish(&self.values[self.output.0].name)
    }
}

/// Per-channel `(factor, shift)` with `bn(x) = factor * x + shift`.
pub(crate) fn bn_affine(graph: &ModelGraph, bn: &BatchNorm) -> (Vec<f64>, Vec<f64>) {
    let s = &graph.weight(bn.scale).data;
    let b = &graph.weight(bn.bias).data;
    let m = &graph.weight(bn.mean).data;
    let v = &graph.weight(bn.var).data;
    let factor: Vec<f64> = s
        .iter()
        .zip(v)
        .map(|(&s, &v)| s as f64 / (v as f64 + bn.epsilon as f64).sqrt())
        .collect();
    let shift = factor
        .iter()
        .zip(b.iter().zip(m))
        .map(|(f, (&b, &m))| b as f64 - f * m as f64)
        .collect();
    (factor, shift)
}

fn remap_weights(op: &Op, mut f: impl FnMut(WeightId) -> WeightId) -> Op {
    match op {
        Op::Conv(c) => Op::Conv(Conv {
            weight: f(c.weight),
            bias: c.bias.map(&mut f),
            ..c.clone()
        }),
        Op::Gemm(g) => Op::Gemm(Gemm {
            weight: f(g.weight),
            bias: g.bias.map(&mut f),
        }),
        Op::BatchNorm(bn) => Op::BatchNorm(BatchNorm {
            scale: f(bn.scale),
            bias: f(bn.bias),
            mean: f(bn.mean),
            var: f(bn.var),
            epsilon: bn.epsilon,
        }),
        other => other.clone(),
    }
}

/// Incremental graph construction with shape inference at every step.
pub struct GraphBuilder {
    values: Vec<ValueInfo>,
    nodes: Vec<Node>,
    weights: Vec<Weight>,
    value_index: BTreeMap<String, ValueId>,
}

impl GraphBuilder {
    pub fn new(input_name: &str, input_shape: Vec<usize>) -> Self {
        let mut value_index = BTreeMap::new();
        value_index.insert(input_name.to_string(), ValueId(0));
        Self {
            values: vec![ValueInfo {
                name: input_name.to_string(),
                shape: input_shape,
                producer: None,
            }],
            nodes: Vec::new(),
            weights: Vec::new(),
            value_index,
        }
    }

    pub fn weight(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) -> WeightId {
        self.weights.push(Weight {
            name: name.to_string(),
            shape,
            data,
        });
        WeightId(self.weights.len() - 1)
    }

    pub fn weight_ref(&self, id: WeightId) -> &Weight {
        &self.weights[id.0]
    }

    pub fn has_value(&self, name: &str) -> bool {
        self.value_index.contains_key(name)
    }

    pub fn node(&mut self, name: &str, op: Op, inputs: &[&str], output: &str) -> Result<ValueId> {
        if self.value_index.contains_key(output) {
            return Err(Error::InvalidModel(format!(
                "value `{output}` produced twice (node `{name}`)"
            )));
        }
        let ids = inputs
            .iter()
            .map(|n| {
                self.value_index
                    .get(*n)
                    .copied()
                    .ok_or_else(|| Error::InvalidModel(format!("node `{name}` reads undefined value `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        for w in op.weights() {
            let weight = &self.weights[w.0];
            if weight.data.len() != weight.shape.iter().product::<usize>() {
                return Err(Error::InvalidModel(format!(
                    "weight `{}` has {} values for shape {:?}",
                    weight.name,
                    weight.data.len(),
                    weight.shape
                )));
            }
        }
        let shapes: Vec<&[usize]> = ids.iter().map(|v| self.values[v.0].shape.as_slice()).collect();
        let shape = infer_shape(name, &op, &shapes, &self.weights)?;
        let out = ValueId(self.values.len());
        self.values.push(ValueInfo {
            name: output.to_string(),
            shape,
            producer: Some(self.nodes.len()),
        });
        self.value_index.insert(output.to_string(), out);
        self.nodes.push(Node {
            name: name.to_string(),
            op,
            inputs: ids,
            output: out,
        });
        Ok(out)
    }

    pub fn finish(self, output: &str) -> Result<ModelGraph> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let out = *self
            .value_index
            .get(output)
            .ok_or_else(|| Error::InvalidModel(format!("graph output `{output}` is never produced")))?;
        Ok(ModelGraph {
            values: self.values,
            nodes: self.nodes,
            weights: self.weights,
            value_index: self.value_index,
            input: ValueId(0),
            output: out,
        })
    }
}

fn invalid(node: &str, msg: impl std::fmt::Display) -> Error {
    Error::InvalidModel(format!("node `{node}`: {msg}"))
}

fn window_out(len: usize, pad: usize, kernel: usize, stride: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = len + pad;
    if stride == 0 || kernel == 0 || padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

fn infer_shape(name: &str, op: &Op, inputs: &[&[usize]], weights: &[Weight]) -> Result<Vec<usize>> {
    let arity = match op {
        Op::Add => 2,
        Op::Concat => inputs.len().max(1),
        _ => 1,
    };
    if inputs.len() != arity || inputs.is_empty() {
        return Err(invalid(name, format!("expected {arity} inputs, got {}", inputs.len())));
    }
    let x = inputs[0];
    let need_map = |x: &[usize]| -> Result<()> {
        if x.len() != 3 {
            return Err(invalid(name, format!("expects a [C,H,W] input, got {x:?}")));
        }
        Ok(())
    };
    match op {
        Op::Conv(c) => {
            need_map(x)?;
            let w = &weights[c.weight.0].shape;
            if w.len() != 4 || w[1] != x[0] {
                return Err(invalid(name, format!("weight {w:?} incompatible with input {x:?}")));
            }
            if let Some(b) = c.bias {
                if weights[b.0].shape != [w[0]] {
                    return Err(invalid(name, "bias length differs from output channels"));
                }
            }
            let h = window_out(x[1], c.pads[0] + c.pads[2], w[2], c.strides[0], c.dilations[0]);
            let wd = window_out(x[2], c.pads[1] + c.pads[3], w[3], c.strides[1], c.dilations[1]);
            match (h, wd) {
                (Some(h), Some(wd)) => Ok(vec![w[0], h, wd]),
                _ => Err(invalid(name, "kernel larger than padded input")),
            }
        }
        Op::MaxPool(p) | Op::AveragePool(p) => {
            need_map(x)?;
            let h = window_out(x[1], p.pads[0] + p.pads[2], p.kernel[0], p.strides[0], 1);
            let w = window_out(x[2], p.pads[1] + p.pads[3], p.kernel[1], p.strides[1], 1);
            match (h, w) {
                (Some(h), Some(w)) => Ok(vec![x[0], h, w]),
                _ => Err(invalid(name, "pool window larger than padded input")),
            }
        }
        Op::GlobalAveragePool => {
            need_map(x)?;
            Ok(vec![x[0], 1, 1])
        }
        Op::Gemm(g) => {
            if x.len() != 1 {
                return Err(invalid(name, format!("Gemm expects a flat input, got {x:?}")));
            }
            let w = &weights[g.weight.0].shape;
            if w.len() != 2 || w[1] != x[0] {
                return Err(invalid(name, format!("weight {w:?} incompatible with input {x:?}")));
            }
            if let Some(b) = g.bias {
                if weights[b.0].shape.iter().product::<usize>() != w[0] {
                    return Err(invalid(name, "bias length differs from output units"));
                }
            }
            Ok(vec![w[0]])
        }
        Op::Add => {
            if inputs[0] != inputs[1] {
                return Err(invalid(name, format!("Add of {:?} and {:?}", inputs[0], inputs[1])));
            }
            Ok(x.to_vec())
        }
        Op::Concat => {
            let mut out = x.to_vec();
            for other in &inputs[1..] {
                if other.len() != x.len() || other[1..] != x[1..] {
                    return Err(invalid(
                        name,
                        format!("Concat of mismatched shapes {x:?} and {other:?}"),
                    ));
                }
                out[0] += other[0];
            }
            Ok(out)
        }
        Op::Flatten => Ok(vec![x.iter().product()]),
        Op::Relu => Ok(x.to_vec()),
        Op::BatchNorm(bn) => {
            for w in [bn.scale, bn.bias, bn.mean, bn.var] {
                if weights[w.0].data.len() != x[0] {
                    return Err(invalid(name, "BatchNorm parameters differ from channel count"));
                }
            }
            Ok(x.to_vec())
        }
    }
}
