//! Restricted ONNX `ModelProto` reader and writer.
//!
//! Field numbers follow `onnx.proto` (IR version 3+). Only the messages and
//! fields needed for the supported op set are decoded; everything else is
//! skipped by the wire reader.

use std::collections::BTreeMap;

use super::protobuf::{for_each_field, FieldValue, Writer};
use super::{build_graph, Attr, RawGraph, RawNode};
use crate::error::{Error, Result};
use crate::graph::{ModelGraph, Op, Weight};

const OPSET_RANGE: std::ops::RangeInclusive<i64> = 11..=17;

mod field {
    pub const MODEL_GRAPH: u32 = 7;
    pub const MODEL_OPSET: u32 = 8;
    pub const OPSET_DOMAIN: u32 = 1;
    pub const OPSET_VERSION: u32 = 2;

    pub const GRAPH_NODE: u32 = 1;
    pub const GRAPH_NAME: u32 = 2;
    pub const GRAPH_INITIALIZER: u32 = 5;
    pub const GRAPH_INPUT: u32 = 11;
    pub const GRAPH_OUTPUT: u32 = 12;

    pub const NODE_INPUT: u32 = 1;
    pub const NODE_OUTPUT: u32 = 2;
    pub const NODE_NAME: u32 = 3;
    pub const NODE_OP_TYPE: u32 = 4;
    pub const NODE_ATTRIBUTE: u32 = 5;
    pub const NODE_DOMAIN: u32 = 7;

    pub const ATTR_NAME: u32 = 1;
    pub const ATTR_F: u32 = 2;
    pub const ATTR_I: u32 = 3;
    pub const ATTR_S: u32 = 4;
    pub const ATTR_T: u32 = 5;
    pub const ATTR_FLOATS: u32 = 7;
    pub const ATTR_INTS: u32 = 8;
    pub const ATTR_TYPE: u32 = 20;

    pub const TENSOR_DIMS: u32 = 1;
    pub const TENSOR_DATA_TYPE: u32 = 2;
    pub const TENSOR_FLOAT_DATA: u32 = 4;
    pub const TENSOR_INT32_DATA: u32 = 5;
    pub const TENSOR_INT64_DATA: u32 = 7;
    pub const TENSOR_NAME: u32 = 8;
    pub const TENSOR_RAW_DATA: u32 = 9;
    pub const TENSOR_DOUBLE_DATA: u32 = 10;
    pub const TENSOR_DATA_LOCATION: u32 = 14;

    pub const VALUE_NAME: u32 = 1;
    pub const VALUE_TYPE: u32 = 2;
    pub const TYPE_TENSOR: u32 = 1;
    pub const TENSOR_TYPE_ELEM: u32 = 1;
    pub const TENSOR_TYPE_SHAPE: u32 = 2;
    pub const SHAPE_DIM: u32 = 1;
    pub const DIM_VALUE: u32 = 1;
    pub const DIM_PARAM: u32 = 2;
}

const DT_FLOAT: i64 = 1;
const DT_INT32: i64 = 6;
const DT_INT64: i64 = 7;
const DT_DOUBLE: i64 = 11;

/// Parses a serialized ONNX model and folds BatchNorm layers into the
/// preceding Conv/Gemm weights.
pub fn parse_onnx_subset(bytes: &[u8]) -> Result<ModelGraph> {
    parse_onnx_unfolded(bytes)?.fold_batch_norms()
}

/// Parses without folding; BatchNorm nodes stay explicit.
pub fn parse_onnx_unfolded(bytes: &[u8]) -> Result<ModelGraph> {
    let mut graph_bytes = None;
    let mut opset: Option<i64> = None;
    for_each_field(bytes, |n, v| {
        match n {
            field::MODEL_GRAPH => graph_bytes = Some(v.as_bytes()?),
            field::MODEL_OPSET => {
                let (domain, version) = decode_opset(v.as_bytes()?)?;
                if domain.is_empty() || domain == "ai.onnx" {
                    opset = Some(version);
                }
            }
            _ => {}
        }
        Ok(())
    })?;
    let graph_bytes = graph_bytes.ok_or_else(|| Error::InvalidModel("model has no graph".into()))?;
    let version = opset.ok_or_else(|| Error::InvalidModel("model declares no default-domain opset".into()))?;
    if !OPSET_RANGE.contains(&version) {
        return Err(Error::UnsupportedOpset(version));
    }
    build_graph(decode_graph(graph_bytes)?)
}

fn decode_opset(buf: &[u8]) -> Result<(String, i64)> {
    let mut domain = String::new();
    let mut version = 0;
    for_each_field(buf, |n, v| {
        match n {
            field::OPSET_DOMAIN => domain = v.as_str()?.to_string(),
            field::OPSET_VERSION => version = v.as_i64()?,
            _ => {}
        }
        Ok(())
    })?;
    Ok((domain, version))
}

struct ValueSig {
    name: String,
    dims: Vec<Dim>,
}

enum Dim {
    Value(i64),
    Param(String),
    Unknown,
}

fn decode_graph(buf: &[u8]) -> Result<RawGraph> {
    let mut nodes = Vec::new();
    let mut weights = BTreeMap::new();
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    for_each_field(buf, |n, v| {
        match n {
            field::GRAPH_NODE => nodes.push(decode_node(v.as_bytes()?)?),
            field::GRAPH_INITIALIZER => {
                let w = decode_tensor(v.as_bytes()?)?;
                weights.insert(w.name.clone(), w);
            }
            field::GRAPH_INPUT => inputs.push(decode_value_info(v.as_bytes()?)?),
            field::GRAPH_OUTPUT => outputs.push(decode_value_info(v.as_bytes()?)?),
            field::GRAPH_NAME => {}
            _ => {}
        }
        Ok(())
    })?;

    // Constant nodes become weights.
    let mut rest = Vec::with_capacity(nodes.len());
    for (node, tensor) in nodes {
        match tensor {
            Some(mut w) if node.op_type == "Constant" => {
                let out = node.outputs.first().cloned().unwrap_or_default();
                w.name = out.clone();
                weights.insert(out, w);
            }
            _ => rest.push(node),
        }
    }

    let activations: Vec<&ValueSig> = inputs.iter().filter(|v| !weights.contains_key(&v.name)).collect();
    let [input] = activations.as_slice() else {
        return Err(Error::InvalidModel(format!(
            "expected exactly one activation input, found {}",
            activations.len()
        )));
    };
    let shape = strip_batch(input)?;
    let output = outputs
        .first()
        .ok_or_else(|| Error::InvalidModel("graph declares no output".into()))?
        .name
        .clone();
    Ok(RawGraph {
        input: (input.name.clone(), shape),
        output,
        nodes: rest,
        weights,
    })
}

fn strip_batch(sig: &ValueSig) -> Result<Vec<usize>> {
    let Some((batch, rest)) = sig.dims.split_first() else {
        return Err(Error::InvalidModel(format!("input `{}` has no shape", sig.name)));
    };
    match batch {
        Dim::Value(1) | Dim::Param(_) => {}
        Dim::Value(n) => {
            return Err(Error::InvalidModel(format!(
                "input `{}` has fixed batch size {n}; only 1 is supported",
                sig.name
            )))
        }
        Dim::Unknown => return Err(Error::DynamicShape(format!("{}[0]", sig.name))),
    }
    rest.iter()
        .enumerate()
        .map(|(i, d)| match d {
            Dim::Value(v) if *v > 0 => Ok(*v as usize),
            Dim::Param(p) => Err(Error::DynamicShape(p.clone())),
            _ => Err(Error::DynamicShape(format!("{}[{}]", sig.name, i + 1))),
        })
        .collect()
}

fn decode_value_info(buf: &[u8]) -> Result<ValueSig> {
    let mut name = String::new();
    let mut dims = Vec::new();
    for_each_field(buf, |n, v| {
        match n {
            field::VALUE_NAME => name = v.as_str()?.to_string(),
            field::VALUE_TYPE => {
                for_each_field(v.as_bytes()?, |n, v| {
                    if n == field::TYPE_TENSOR {
                        for_each_field(v.as_bytes()?, |n, v| {
                            match n {
                                field::TENSOR_TYPE_ELEM if v.as_i64()? != DT_FLOAT => {
                                    return Err(Error::InvalidModel(format!(
                                        "element type {} is not float32",
                                        v.as_i64()?
                                    )))
                                }
                                field::TENSOR_TYPE_SHAPE => {
                                    for_each_field(v.as_bytes()?, |n, v| {
                                        if n == field::SHAPE_DIM {
                                            dims.push(decode_dim(v.as_bytes()?)?);
                                        }
                                        Ok(())
                                    })?;
                                }
                                _ => {}
                            }
                            Ok(())
                        })?;
                    }
                    Ok(())
                })?;
            }
            _ => {}
        }
        Ok(())
    })?;
    Ok(ValueSig { name, dims })
}

fn decode_dim(buf: &[u8]) -> Result<Dim> {
    let mut dim = Dim::Unknown;
    for_each_field(buf, |n, v| {
        match n {
            field::DIM_VALUE => dim = Dim::Value(v.as_i64()?),
            field::DIM_PARAM => dim = Dim::Param(v.as_str()?.to_string()),
            _ => {}
        }
        Ok(())
    })?;
    Ok(dim)
}

/// Returns the node and, for `Constant` nodes, its value tensor.
fn decode_node(buf: &[u8]) -> Result<(RawNode, Option<Weight>)> {
    let mut node = RawNode {
        name: String::new(),
        op_type: String::new(),
        inputs: Vec::new(),
        outputs: Vec::new(),
        attrs: BTreeMap::new(),
    };
    let mut domain = String::new();
    let mut tensor = None;
    for_each_field(buf, |n, v| {
        match n {
            field::NODE_INPUT => node.inputs.push(v.as_str()?.to_string()),
            field::NODE_OUTPUT => node.outputs.push(v.as_str()?.to_string()),
            field::NODE_NAME => node.name = v.as_str()?.to_string(),
            field::NODE_OP_TYPE => node.op_type = v.as_str()?.to_string(),
            field::NODE_DOMAIN => domain = v.as_str()?.to_string(),
            field::NODE_ATTRIBUTE => {
                let (name, attr, t) = decode_attribute(v.as_bytes()?)?;
                if let Some(t) = t {
                    tensor = Some(t);
                }
                if let Some(a) = attr {
                    node.attrs.insert(name, a);
                }
            }
            _ => {}
        }
        Ok(())
    })?;
    if node.name.is_empty() {
        node.name = node.outputs.first().cloned().unwrap_or_default();
    }
    if !(domain.is_empty() || domain == "ai.onnx") {
        return Err(Error::UnsupportedOp {
            op: format!("{domain}::{}", node.op_type),
            node: node.name,
        });
    }
    Ok((node, tensor))
}

fn decode_attribute(buf: &[u8]) -> Result<(String, Option<Attr>, Option<Weight>)> {
    let mut name = String::new();
    let mut ty = None;
    let mut f = None;
    let mut i = None;
    let mut s = None;
    let mut t = None;
    let mut floats: Vec<f32> = Vec::new();
    let mut ints: Vec<i64> = Vec::new();
    let mut saw_floats = false;
    let mut saw_ints = false;
    for_each_field(buf, |n, v| {
        match n {
            field::ATTR_NAME => name = v.as_str()?.to_string(),
            field::ATTR_F => f = Some(v.as_f32()?),
            field::ATTR_I => i = Some(v.as_i64()?),
            field::ATTR_S => s = Some(String::from_utf8_lossy(v.as_bytes()?).into_owned()),
            field::ATTR_T => t = Some(decode_tensor(v.as_bytes()?)?),
            field::ATTR_FLOATS => {
                saw_floats = true;
                floats.extend(v.floats()?);
            }
            field::ATTR_INTS => {
                saw_ints = true;
                ints.extend(v.ints()?);
            }
            field::ATTR_TYPE => ty = Some(v.as_i64()?),
            _ => {}
        }
        Ok(())
    })?;
    let attr = match ty {
        Some(1) => f.map(Attr::Float),
        Some(2) => i.map(Attr::Int),
        Some(3) => s.map(Attr::Str),
        Some(6) => Some(Attr::Floats(floats)),
        Some(7) => Some(Attr::Ints(ints)),
        Some(_) => None,
        None => {
            if saw_ints {
                Some(Attr::Ints(ints))
            } else if saw_floats {
                Some(Attr::Floats(floats))
            } else if let Some(v) = i {
                Some(Attr::Int(v))
            } else if let Some(v) = f {
                Some(Attr::Float(v))
            } else {
                s.map(Attr::Str)
            }
        }
    };
    Ok((name, attr, t))
}

fn decode_tensor(buf: &[u8]) -> Result<Weight> {
    let mut dims: Vec<i64> = Vec::new();
    let mut dtype = 0;
    let mut name = String::new();
    let mut raw: Option<&[u8]> = None;
    let mut floats: Vec<f32> = Vec::new();
    let mut ints: Vec<i64> = Vec::new();
    let mut doubles: Vec<f64> = Vec::new();
    let mut external = false;
    for_each_field(buf, |n, v| {
        match n {
            field::TENSOR_DIMS => dims.extend(v.ints()?),
            field::TENSOR_DATA_TYPE => dtype = v.as_i64()?,
            field::TENSOR_FLOAT_DATA => floats.extend(v.floats()?),
            field::TENSOR_INT32_DATA | field::TENSOR_INT64_DATA => ints.extend(v.ints()?),
            field::TENSOR_DOUBLE_DATA => match v {
                FieldValue::Bytes(b) => doubles.extend(
                    b.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))),
                ),
                other => doubles.push(f64::from_bits(other.as_u64()?)),
            },
            field::TENSOR_NAME => name = v.as_str()?.to_string(),
            field::TENSOR_RAW_DATA => raw = Some(v.as_bytes()?),
            field::TENSOR_DATA_LOCATION => external = v.as_i64()? == 1,
            _ => {}
        }
        Ok(())
    })?;
    if external {
        return Err(Error::InvalidModel(format!("tensor `{name}` uses external data")));
    }
    let shape = dims
        .iter()
        .map(|&d| usize::try_from(d).map_err(|_| Error::InvalidModel(format!("tensor `{name}` has dim {d}"))))
        .collect::<Result<Vec<_>>>()?;
    let data: Vec<f32> = match (dtype, raw) {
        (DT_FLOAT, Some(r)) => {
            if r.len() % 4 != 0 {
                return Err(Error::Framing(format!("raw data of `{name}` is not a multiple of 4 bytes")));
            }
            r.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        }
        (DT_FLOAT, None) => floats,
        (DT_INT64, Some(r)) => r
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes")) as f32)
            .collect(),
        (DT_INT32, Some(r)) => r
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")) as f32)
            .collect(),
        (DT_INT32 | DT_INT64, None) => ints.iter().map(|&v| v as f32).collect(),
        (DT_DOUBLE, Some(r)) => r
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as f32)
            .collect(),
        (DT_DOUBLE, None) => doubles.iter().map(|&v| v as f32).collect(),
        (other, _) => {
            return Err(Error::InvalidModel(format!("tensor `{name}` has unsupported data type {other}")))
        }
    };
    let expected: usize = shape.iter().product();
    if data.len() != expected {
        return Err(Error::InvalidModel(format!(
            "tensor `{name}` holds {} values for shape {shape:?}",
            data.len()
        )));
    }
    Ok(Weight { name, shape, data })
}

/// Serializes a graph as an ONNX model (opset 13, weights as raw data).
pub fn to_onnx_bytes(graph: &ModelGraph) -> Vec<u8> {
    let mut g = Writer::new();
    let name = |v: crate::graph::ValueId| graph.value(v).name.clone();
    let mut used = Vec::new();
    for node in graph.nodes() {
        let mut n = Writer::new();
        for &i in &node.inputs {
            n.string(field::NODE_INPUT, &name(i));
        }
        let mut attrs: Vec<(&str, Attr)> = Vec::new();
        let mut extra_inputs = Vec::new();
        match &node.op {
            Op::Conv(c) => {
                let ws = &graph.weight(c.weight).shape;
                extra_inputs.push(c.weight);
                extra_inputs.extend(c.bias);
                attrs.push(("kernel_shape", Attr::Ints(vec![ws[2] as i64, ws[3] as i64])));
                attrs.push(("strides", ints(&c.strides)));
                attrs.push(("pads", ints(&c.pads)));
                attrs.push(("dilations", ints(&c.dilations)));
            }
            Op::MaxPool(p) | Op::AveragePool(p) => {
                attrs.push(("kernel_shape", ints(&p.kernel)));
                attrs.push(("strides", ints(&p.strides)));
                attrs.push(("pads", ints(&p.pads)));
                if matches!(node.op, Op::AveragePool(_)) {
                    attrs.push(("count_include_pad", Attr::Int(p.count_include_pad as i64)));
                }
            }
            Op::Gemm(gm) => {
                extra_inputs.push(gm.weight);
                extra_inputs.extend(gm.bias);
                attrs.push(("transB", Attr::Int(1)));
            }
            Op::Concat => attrs.push(("axis", Attr::Int(1))),
            Op::Flatten => attrs.push(("axis", Attr::Int(1))),
            Op::BatchNorm(bn) => {
                extra_inputs.extend([bn.scale, bn.bias, bn.mean, bn.var]);
                attrs.push(("epsilon", Attr::Float(bn.epsilon)));
            }
            Op::Relu | Op::GlobalAveragePool | Op::Add => {}
        }
        for w in &extra_inputs {
            n.string(field::NODE_INPUT, &graph.weight(*w).name);
            if !used.contains(w) {
                used.push(*w);
            }
        }
        n.string(field::NODE_OUTPUT, &name(node.output));
        n.string(field::NODE_NAME, &node.name);
        n.string(field::NODE_OP_TYPE, node.op.kind());
        for (key, value) in attrs {
            n.message(field::NODE_ATTRIBUTE, encode_attr(key, &value));
        }
        g.message(field::GRAPH_NODE, n);
    }
    g.string(field::GRAPH_NAME, "neurflow");
    for w in used {
        let w = graph.weight(w);
        let mut t = Writer::new();
        for &d in &w.shape {
            t.int(field::TENSOR_DIMS, d as i64);
        }
        t.int(field::TENSOR_DATA_TYPE, DT_FLOAT);
        t.string(field::TENSOR_NAME, &w.name);
        let raw: Vec<u8> = w.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        t.bytes(field::TENSOR_RAW_DATA, &raw);
        g.message(field::GRAPH_INITIALIZER, t);
    }
    g.message(
        field::GRAPH_INPUT,
        encode_value_info(&name(graph.input()), graph.input_shape()),
    );
    g.message(
        field::GRAPH_OUTPUT,
        encode_value_info(&name(graph.output()), graph.output_shape()),
    );

    let mut m = Writer::new();
    m.int(1, 8); // ir_version
    m.string(2, "neurflow"); // producer_name
    m.message(field::MODEL_GRAPH, g);
    let mut opset = Writer::new();
    opset.string(field::OPSET_DOMAIN, "");
    opset.int(field::OPSET_VERSION, 13);
    m.message(field::MODEL_OPSET, opset);
    m.into_bytes()
}

fn ints<const N: usize>(v: &[usize; N]) -> Attr {
    Attr::Ints(v.iter().map(|&x| x as i64).collect())
}

fn encode_attr(key: &str, value: &Attr) -> Writer {
    let mut a = Writer::new();
    a.string(field::ATTR_NAME, key);
    match value {
        Attr::Float(f) => {
            a.float(field::ATTR_F, *f).int(field::ATTR_TYPE, 1);
        }
        Attr::Int(i) => {
            a.int(field::ATTR_I, *i).int(field::ATTR_TYPE, 2);
        }
        Attr::Str(s) => {
            a.string(field::ATTR_S, s).int(field::ATTR_TYPE, 3);
        }
        Attr::Floats(fs) => {
            for &f in fs {
                a.float(field::ATTR_FLOATS, f);
            }
            a.int(field::ATTR_TYPE, 6);
        }
        Attr::Ints(is) => {
            for &i in is {
                a.int(field::ATTR_INTS, i);
            }
            a.int(field::ATTR_TYPE, 7);
        }
    }
    a
}

fn encode_value_info(name: &str, shape: &[usize]) -> Writer {
    let mut shape_w = Writer::new();
    for &d in std::iter::once(&1usize).chain(shape) {
        let mut dim = Writer::new();
        dim.int(field::DIM_VALUE, d as i64);
        shape_w.message(field::SHAPE_DIM, dim);
    }
    let mut tensor = Writer::new();
    tensor.int(field::TENSOR_TYPE_ELEM, DT_FLOAT);
    tensor.message(field::TENSOR_TYPE_SHAPE, shape_w);
    let mut ty = Writer::new();
    ty.message(field::TYPE_TENSOR, tensor);
    let mut v = Writer::new();
    v.string(field::VALUE_NAME, name);
    v.message(field::VALUE_TYPE, ty);
    v
}
