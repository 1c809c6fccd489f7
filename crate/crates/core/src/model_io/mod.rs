//! Model loading: a restricted ONNX reader, the toy descriptor format, and
//! inspection-layer (tap) resolution.
//!
//! Both file formats decode into the same intermediate node list, which is
//! then validated into a [`ModelGraph`] by one shared path.

pub mod onnx;
pub mod protobuf;
pub mod taps;
pub mod toy;

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{BatchNorm, Conv, Gemm, GraphBuilder, ModelGraph, Op, Pool, Weight, WeightId};

pub use onnx::{parse_onnx_subset, parse_onnx_unfolded, to_onnx_bytes};
pub use taps::{resolve_taps, Tap, TapConfig, TapSpec};
pub use toy::{load_toy_model, load_toy_model_unfolded, load_toy_model_files};

/// Loads an `.onnx` file or a toy `.toml` descriptor, by extension.
pub fn load_model(path: &Path) -> Result<ModelGraph> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("onnx") => parse_onnx_subset(&std::fs::read(path)?),
        Some("toml") => load_toy_model_files(path),
        _ => Err(Error::InvalidModel(format!(
            "{}: expected an .onnx file or a .toml descriptor",
            path.display()
        ))),
    }
}

/// Ops accepted by the loaders, by their ONNX names.
pub const SUPPORTED_OPS: &[&str] = &[
    "Conv",
    "Relu",
    "MaxPool",
    "AveragePool",
    "GlobalAveragePool",
    "Gemm",
    "Add",
    "Concat",
    "Flatten",
    "BatchNormalization",
];

#[derive(Clone, Debug, PartialEq)]
pub enum Attr {
    Int(i64),
    Ints(Vec<i64>),
    Float(f32),
    Floats(Vec<f32>),
    Str(String),
}

/// A node as it appears in a file, before validation.
#[derive(Clone, Debug, PartialEq)]
pub struct RawNode {
    pub name: String,
    pub op_type: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub attrs: BTreeMap<String, Attr>,
}

pub(crate) struct RawGraph {
    pub input: (String, Vec<usize>),
    pub output: String,
    pub nodes: Vec<RawNode>,
    pub weights: BTreeMap<String, Weight>,
}

struct AttrView<'a> {
    node: &'a RawNode,
}

impl AttrView<'_> {
    fn int(&self, key: &str, default: i64) -> Result<i64> {
        match self.node.attrs.get(key) {
            None => Ok(default),
            Some(Attr::Int(v)) => Ok(*v),
            Some(other) => Err(self.bad(key, other)),
        }
    }

    fn float(&self, key: &str, default: f32) -> Result<f32> {
        match self.node.attrs.get(key) {
            None => Ok(default),
            Some(Attr::Float(v)) => Ok(*v),
            Some(Attr::Int(v)) => Ok(*v as f32),
            Some(other) => Err(self.bad(key, other)),
        }
    }

    fn usizes(&self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.node.attrs.get(key) {
            None => Ok(None),
            Some(Attr::Ints(v)) => v
                .iter()
                .map(|&i| usize::try_from(i).map_err(|_| self.bad(key, &Attr::Int(i))))
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(other) => Err(self.bad(key, other)),
        }
    }

    fn pair(&self, key: &str, default: usize) -> Result<[usize; 2]> {
        match self.usizes(key)? {
            None => Ok([default; 2]),
            Some(v) if v.len() == 2 => Ok([v[0], v[1]]),
            Some(v) => Err(self.invalid(format!("`{key}` must have 2 entries, got {v:?}"))),
        }
    }

    fn pads(&self) -> Result<[usize; 4]> {
        match self.usizes("pads")? {
            None => Ok([0; 4]),
            Some(v) if v.len() == 4 => Ok([v[0], v[1], v[2], v[3]]),
            Some(v) => Err(self.invalid(format!("`pads` must have 4 entries, got {v:?}"))),
        }
    }

    fn no_auto_pad(&self) -> Result<()> {
        match self.node.attrs.get("auto_pad") {
            None => Ok(()),
            Some(Attr::Str(s)) if s == "NOTSET" => Ok(()),
            Some(other) => Err(self.invalid(format!("auto_pad {other:?} is not supported"))),
        }
    }

    fn require(&self, key: &str, expected: i64, default: i64) -> Result<()> {
        let v = self.int(key, default)?;
        if v != expected {
            return Err(self.invalid(format!("`{key}` = {v} is not supported")));
        }
        Ok(())
    }

    fn bad(&self, key: &str, got: &Attr) -> Error {
        self.invalid(format!("attribute `{key}` has unexpected value {got:?}"))
    }

    fn invalid(&self, msg: String) -> Error {
        Error::InvalidModel(format!("node `{}` ({}): {msg}", self.node.name, self.node.op_type))
    }
}

/// Validates raw nodes into a graph. Nodes may arrive in any order as long
/// as the dependency relation is acyclic.
pub(crate) fn build_graph(raw: RawGraph) -> Result<ModelGraph> {
    let RawGraph {
        input,
        output,
        nodes,
        weights,
    } = raw;
    if nodes.is_empty() {
        return Err(Error::EmptyGraph);
    }
    for n in &nodes {
        if !SUPPORTED_OPS.contains(&n.op_type.as_str()) {
            return Err(Error::UnsupportedOp {
                op: n.op_type.clone(),
                node: n.name.clone(),
            });
        }
    }

    let mut b = GraphBuilder::new(&input.0, input.1);
    let mut weight_ids: BTreeMap<String, WeightId> = BTreeMap::new();
    let mut weight_id = |b: &mut GraphBuilder, node: &RawNode, name: &str| -> Result<WeightId> {
        if let Some(&id) = weight_ids.get(name) {
            return Ok(id);
        }
        let w = weights.get(name).ok_or_else(|| Error::NonConstantWeight {
            node: node.name.clone(),
            input: name.to_string(),
        })?;
        let id = b.weight(&w.name, w.shape.clone(), w.data.clone());
        weight_ids.insert(name.to_string(), id);
        Ok(id)
    };

    let mut pending: Vec<&RawNode> = nodes.iter().collect();
    while !pending.is_empty() {
        let before = pending.len();
        let mut rest = Vec::new();
        for node in pending {
            let acts = activation_inputs(node);
            if !acts.iter().all(|a| b.has_value(a)) {
                rest.push(node);
                continue;
            }
            for a in &acts {
                if weights.contains_key(*a) {
                    return Err(Error::InvalidModel(format!(
                        "node `{}` reads constant `{a}` as an activation",
                        node.name
                    )));
                }
            }
            let op = convert(&mut b, node, &mut weight_id)?;
            let out = node
                .outputs
                .first()
                .ok_or_else(|| Error::InvalidModel(format!("node `{}` has no output", node.name)))?;
            b.node(&node.name, op, &acts, out)?;
        }
        if rest.len() == before {
            let names: Vec<&str> = rest.iter().map(|n| n.name.as_str()).collect();
            return Err(Error::InvalidModel(format!(
                "nodes {names:?} read values that are never produced (or form a cycle)"
            )));
        }
        pending = rest;
    }
    b.finish(&output)
}

fn activation_inputs(node: &RawNode) -> Vec<&str> {
    let n = match node.op_type.as_str() {
        "Add" => 2,
        "Concat" => node.inputs.len(),
        _ => 1,
    };
    node.inputs.iter().take(n).map(String::as_str).collect()
}

fn convert(
    b: &mut GraphBuilder,
    node: &RawNode,
    weight_id: &mut impl FnMut(&mut GraphBuilder, &RawNode, &str) -> Result<WeightId>,
) -> Result<Op> {
    let a = AttrView { node };
    let input = |i: usize| -> Result<&str> {
        node.inputs
            .get(i)
            .map(String::as_str)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| a.invalid(format!("missing input #{i}")))
    };
    let optional = |i: usize| node.inputs.get(i).map(String::as_str).filter(|s| !s.is_empty());
    Ok(match node.op_type.as_str() {
        "Conv" => {
            a.no_auto_pad()?;
            a.require("group", 1, 1)?;
            let weight = weight_id(b, node, input(1)?)?;
            let bias = optional(2).map(|n| weight_id(b, node, n)).transpose()?;
            Op::Conv(Conv {
                weight,
                bias,
                strides: a.pair("strides", 1)?,
                pads: a.pads()?,
                dilations: a.pair("dilations", 1)?,
            })
        }
        "Relu" => Op::Relu,
        "MaxPool" | "AveragePool" => {
            a.no_auto_pad()?;
            a.require("ceil_mode", 0, 0)?;
            if node.op_type == "MaxPool" {
                a.require("storage_order", 0, 0)?;
                if a.pair("dilations", 1)? != [1, 1] {
                    return Err(a.invalid("pool dilations are not supported".into()));
                }
            }
            let kernel = match a.usizes("kernel_shape")? {
                Some(k) if k.len() == 2 => [k[0], k[1]],
                _ => return Err(a.invalid("kernel_shape with 2 entries is required".into())),
            };
            let pool = Pool {
                kernel,
                strides: a.pair("strides", 1)?,
                pads: a.pads()?,
                count_include_pad: a.int("count_include_pad", 0)? != 0,
            };
            if node.op_type == "MaxPool" {
                Op::MaxPool(pool)
            } else {
                Op::AveragePool(pool)
            }
        }
        "GlobalAveragePool" => Op::GlobalAveragePool,
        "Gemm" => {
            a.require("transA", 0, 0)?;
            let alpha = a.float("alpha", 1.0)?;
            let beta = a.float("beta", 1.0)?;
            let trans_b = a.int("transB", 0)? != 0;
            let wid = weight_id(b, node, input(1)?)?;
            let bias = optional(2).map(|n| weight_id(b, node, n)).transpose()?;
            // Normalize to a `[out, in]` weight with alpha/beta folded in.
            let needs_copy = !trans_b || alpha != 1.0;
            let weight = if needs_copy {
                let (shape, data) = gemm_weight(b, wid, trans_b, alpha, &a)?;
                b.weight(&format!("{}.weight", node.name), shape, data)
            } else {
                wid
            };
            let bias = match bias {
                Some(id) if beta != 1.0 => {
                    let (shape, data) = scaled_weight(b, id, beta);
                    Some(b.weight(&format!("{}.bias", node.name), shape, data))
                }
                other => other,
            };
            Op::Gemm(Gemm { weight, bias })
        }
        "Add" => Op::Add,
        "Concat" => {
            let axis = a.int("axis", 1)?;
            if axis != 1 && axis != -3 {
                return Err(a.invalid(format!("Concat axis {axis} is not the channel axis")));
            }
            Op::Concat
        }
        "Flatten" => {
            a.require("axis", 1, 1)?;
            Op::Flatten
        }
        "BatchNormalization" => {
            a.require("training_mode", 0, 0)?;
            Op::BatchNorm(BatchNorm {
                scale: weight_id(b, node, input(1)?)?,
                bias: weight_id(b, node, input(2)?)?,
                mean: weight_id(b, node, input(3)?)?,
                var: weight_id(b, node, input(4)?)?,
                epsilon: a.float("epsilon", 1e-5)?,
            })
        }
        other => {
            return Err(Error::UnsupportedOp {
                op: other.to_string(),
                node: node.name.clone(),
            })
        }
    })
}

fn builder_weight(b: &GraphBuilder, id: WeightId) -> Weight {
    b.weight_ref(id).clone()
}

fn gemm_weight(b: &GraphBuilder, id: WeightId, trans_b: bool, alpha: f32, a: &AttrView) -> Result<(Vec<usize>, Vec<f32>)> {
    let w = builder_weight(b, id);
    if w.shape.len() != 2 {
        return Err(a.invalid(format!("Gemm weight must be 2-D, got {:?}", w.shape)));
    }
    if trans_b {
        return Ok((w.shape.clone(), w.data.iter().map(|v| v * alpha).collect()));
    }
    let (k, n) = (w.shape[0], w.shape[1]);
    let mut data = vec![0.0f32; k * n];
    for i in 0..k {
        for j in 0..n {
            data[j * k + i] = w.data[i * n + j] * alpha;
        }
    }
    Ok((vec![n, k], data))
}

fn scaled_weight(b: &GraphBuilder, id: WeightId, factor: f32) -> (Vec<usize>, Vec<f32>) {
    let w = builder_weight(b, id);
    (w.shape.clone(), w.data.iter().map(|v| v * factor).collect())
}
