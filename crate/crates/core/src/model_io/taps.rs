//! Inspection layers ("taps"): the graph values whose channels count as neurons.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ModelGraph, Op, ValueId};

/// Which values to tap: every ReLU fed by a Conv/Gemm, or an explicit list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TapConfig {
    /// The string `"auto"`.
    Auto(AutoTag),
    Named(Vec<String>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

impl Default for TapConfig {
    fn default() -> Self {
        TapConfig::Auto(AutoTag::Auto)
    }
}

impl TapConfig {
    pub fn auto() -> Self {
        Self::default()
    }

    pub fn named<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Self {
        TapConfig::Named(names.into_iter().map(Into::into).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tap {
    /// Position in the spec, 0 = closest to the input.
    pub id: usize,
    pub name: String,
    pub value: ValueId,
    /// Neuron count: channels for `[C,H,W]` values, units for `[F]` values.
    pub width: usize,
}

/// Taps ordered from the input side to the logits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TapSpec {
    taps: Vec<Tap>,
}

impl TapSpec {
    pub fn taps(&self) -> &[Tap] {
        &self.taps
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Tap> {
        self.taps.get(id)
    }

    pub fn by_name(&self, name: &str) -> Result<&Tap> {
        self.taps
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownValue(name.to_string()))
    }

    /// The logit tap.
    pub fn last(&self) -> &Tap {
        self.taps.last().expect("a tap spec always ends at the logits")
    }

    /// The tap below `id`, if any.
    pub fn below(&self, id: usize) -> Option<&Tap> {
        id.checked_sub(1).and_then(|i| self.taps.get(i))
    }
}

/// Resolves tap names against the graph. The logit value is appended if the
/// config does not name it, and named taps are sorted into graph order.
pub fn resolve_taps(graph: &ModelGraph, config: &TapConfig) -> Result<TapSpec> {
    let mut values: Vec<ValueId> = match config {
        TapConfig::Auto(_) => graph
            .nodes()
            .iter()
            .filter(|n| matches!(n.op, Op::Relu))
            .filter(|n| {
                graph
                    .value(n.inputs[0])
                    .producer
                    .is_some_and(|p| matches!(graph.nodes()[p].op, Op::Conv(_) | Op::Gemm(_)))
            })
            .map(|n| n.output)
            .collect(),
        TapConfig::Named(names) => names.iter().map(|n| graph.value_id(n)).collect::<Result<_>>()?,
    };
    if !values.contains(&graph.output()) {
        values.push(graph.output());
    }
    let order = |v: ValueId| graph.value(v).producer.map_or(0, |p| p + 1);
    values.sort_by_key(|&v| order(v));
    values.dedup();

    for pair in values.windows(2) {
        if !graph.depends_on(pair[1], pair[0]) {
            return Err(Error::TapsNotOrdered(
                graph.value(pair[0]).name.clone(),
                graph.value(pair[1]).name.clone(),
            ));
        }
    }
    let taps = values
        .into_iter()
        .enumerate()
        .map(|(id, value)| {
            let info = graph.value(value);
            Tap {
                id,
                name: info.name.clone(),
                value,
                width: info.shape.first().copied().unwrap_or(1),
            }
        })
        .collect();
    Ok(TapSpec { taps })
}
