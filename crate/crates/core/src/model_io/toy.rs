//! Toy descriptor format: a TOML op list plus a flat little-endian f32 blob.
//!
//! Each op lists the weights it consumes as `[name, shape]` pairs; the blob
//! holds them back to back in declaration order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use super::{build_graph, Attr, RawGraph, RawNode};
use crate::error::{Error, Result};
use crate::graph::{ModelGraph, Weight};

pub const TOY_FORMAT: &str = "neurflow-toy/1";

#[derive(Debug, Deserialize)]
struct Descriptor {
    format: String,
    output: String,
    input: InputDecl,
    #[serde(default, rename = "op")]
    ops: Vec<OpDecl>,
}

#[derive(Debug, Deserialize)]
struct InputDecl {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Deserialize)]
struct OpDecl {
    name: String,
    kind: String,
    inputs: Vec<String>,
    output: String,
    #[serde(default)]
    weights: Vec<(String, Vec<usize>)>,
    #[serde(default)]
    attrs: BTreeMap<String, toml::Value>,
}

/// Loads `model.toml` + `model.bin`, folding BatchNorm layers.
pub fn load_toy_model(descriptor: &str, blob: &[u8]) -> Result<ModelGraph> {
    load_toy_model_unfolded(descriptor, blob)?.fold_batch_norms()
}

pub fn load_toy_model_unfolded(descriptor: &str, blob: &[u8]) -> Result<ModelGraph> {
    let desc: Descriptor = toml::from_str(descriptor)?;
    if desc.format != TOY_FORMAT {
        return Err(Error::InvalidModel(format!(
            "descriptor format `{}` is not `{TOY_FORMAT}`",
            desc.format
        )));
    }
    let needed: usize = desc
        .ops
        .iter()
        .flat_map(|o| &o.weights)
        .map(|(_, s)| s.iter().product::<usize>() * 4)
        .sum();
    if needed != blob.len() {
        return Err(Error::BlobLength {
            expected: needed,
            actual: blob.len(),
        });
    }

    let mut offset = 0;
    let mut weights = BTreeMap::new();
    let mut nodes = Vec::with_capacity(desc.ops.len());
    for op in desc.ops {
        let mut inputs = op.inputs;
        for (name, shape) in op.weights {
            let n: usize = shape.iter().product();
            let data = blob[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            offset += 4 * n;
            inputs.push(name.clone());
            weights.insert(name.clone(), Weight { name, shape, data });
        }
        let attrs = op
            .attrs
            .into_iter()
            .map(|(k, v)| attr(&op.name, &k, v).map(|a| (k, a)))
            .collect::<Result<_>>()?;
        nodes.push(RawNode {
            name: op.name,
            op_type: op.kind,
            inputs,
            outputs: vec![op.output],
            attrs,
        });
    }
    build_graph(RawGraph {
        input: (desc.input.name, desc.input.shape),
        output: desc.output,
        nodes,
        weights,
    })
}

/// Reads the descriptor and its sibling blob (`model.bin` next to `model.toml`).
pub fn load_toy_model_files(descriptor: &Path) -> Result<ModelGraph> {
    let text = std::fs::read_to_string(descriptor)?;
    let blob = std::fs::read(descriptor.with_extension("bin"))?;
    load_toy_model(&text, &blob)
}

fn attr(node: &str, key: &str, v: toml::Value) -> Result<Attr> {
    let bad = || Error::InvalidModel(format!("node `{node}`: attribute `{key}` has an unsupported type"));
    Ok(match v {
        toml::Value::Integer(i) => Attr::Int(i),
        toml::Value::Float(f) => Attr::Float(f as f32),
        toml::Value::String(s) => Attr::Str(s),
        toml::Value::Array(items) => {
            if items.iter().all(|i| i.is_integer()) {
                Attr::Ints(items.iter().filter_map(toml::Value::as_integer).collect())
            } else {
                Attr::Floats(
                    items
                        .iter()
                        .map(|i| i.as_float().or_else(|| i.as_integer().map(|x| x as f64)).map(|f| f as f32))
                        .collect::<Option<_>>()
                        .ok_or_else(bad)?,
                )
            }
        }
        _ => return Err(bad()),
    })
}
