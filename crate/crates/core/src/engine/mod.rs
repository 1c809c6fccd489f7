//! Dense forward inference with taps and channel knockouts, block-local
//! vector-Jacobian products, and integrated-gradients attribution.

mod kernels;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ModelGraph, Op, ValueId};
use crate::tensor::Tensor;

/// Channels zeroed at one activation value. Downstream ops see the zeros.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnockoutMask {
    pub at: ValueId,
    pub channels: BTreeSet<usize>,
}

impl KnockoutMask {
    pub fn new(at: ValueId, channels: impl IntoIterator<Item = usize>) -> Self {
        Self {
            at,
            channels: channels.into_iter().collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    fn validate(&self, graph: &ModelGraph) -> Result<()> {
        if self.at.0 >= graph.values().len() {
            return Err(Error::UnknownValue(format!("#{}", self.at.0)));
        }
        let info = graph.value(self.at);
        let width = info.shape.first().copied().unwrap_or(1);
        if let Some(&bad) = self.channels.iter().find(|&&c| c >= width) {
            return Err(Error::ChannelOutOfRange {
                value: info.name.clone(),
                index: bad,
                width,
            });
        }
        Ok(())
    }

    fn apply(&self, t: &mut Tensor) {
        for &c in &self.channels {
            t.channel_mut(c).fill(0.0);
        }
    }
}

fn apply_masks(masks: &[KnockoutMask], at: ValueId, t: &mut Tensor) {
    for m in masks.iter().filter(|m| m.at == at) {
        m.apply(t);
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Activations at the requested taps, in request order.
    pub taps: Vec<Tensor>,
    pub logits: Tensor,
}

/// Runs the whole graph on one sample, returning the requested taps.
pub fn forward_with_taps(
    graph: &ModelGraph,
    input: &Tensor,
    taps: &[ValueId],
    masks: &[KnockoutMask],
) -> Result<ForwardOutput> {
    if input.shape() != graph.input_shape() {
        return Err(Error::ShapeMismatch {
            expected: graph.input_shape().to_vec(),
            actual: input.shape().to_vec(),
        });
    }
    for &t in taps {
        if t.0 >= graph.values().len() {
            return Err(Error::UnknownValue(format!("#{}", t.0)));
        }
    }
    for m in masks {
        m.validate(graph)?;
    }
    let mut values: Vec<Option<Tensor>> = vec![None; graph.values().len()];
    let mut x = input.clone();
    apply_masks(masks, graph.input(), &mut x);
    values[graph.input().0] = Some(x);
    for node in graph.nodes() {
        let ins: Vec<&Tensor> = node
            .inputs
            .iter()
            .map(|v| values[v.0].as_ref().expect("topological order"))
            .collect();
        let mut out = kernels::forward(graph, &node.op, &ins, &graph.value(node.output).shape, None);
        apply_masks(masks, node.output, &mut out);
        values[node.output.0] = Some(out);
    }
    let taps = taps
        .iter()
        .map(|t| values[t.0].clone().expect("all values computed"))
        .collect();
    let logits = values[graph.output().0].take().expect("output computed");
    Ok(ForwardOutput { taps, logits })
}

/// The sub-network between two activation values.
///
/// Every op on a path from `from` to `to` is included. `from` must cut the
/// graph: no op in the block may read an activation that does not itself
/// depend on `from`.
#[derive(Clone, Debug)]
pub struct Block<'g> {
    graph: &'g ModelGraph,
    from: ValueId,
    to: ValueId,
    nodes: Vec<usize>,
}

impl<'g> Block<'g> {
    pub fn new(graph: &'g ModelGraph, from: ValueId, to: ValueId) -> Result<Self> {
        let n = graph.values().len();
        if from.0 >= n || to.0 >= n {
            return Err(Error::UnknownValue(format!("#{}", from.0.max(to.0))));
        }
        let name = |v: ValueId| graph.value(v).name.clone();
        let down = graph.downstream_of(from);
        if !down[to.0] {
            return Err(Error::NotConnected {
                from: name(from),
                to: name(to),
            });
        }
        let up = graph.upstream_of(to);
        let mut nodes = Vec::new();
        for (i, node) in graph.nodes().iter().enumerate() {
            if node.output == from || !(down[node.output.0] && up[node.output.0]) {
                continue;
            }
            if let Some(&other) = node.inputs.iter().find(|v| !down[v.0]) {
                return Err(Error::NotACut {
                    from: name(from),
                    to: name(to),
                    other: name(other),
                });
            }
            nodes.push(i);
        }
        Ok(Self { graph, from, to, nodes })
    }

    pub fn from(&self) -> ValueId {
        self.from
    }

    pub fn to(&self) -> ValueId {
        self.to
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.graph.value(self.from).shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.graph.value(self.to).shape
    }

    fn check_point(&self, point: &Tensor) -> Result<()> {
        if point.shape() != self.input_shape() {
            return Err(Error::ShapeMismatch {
                expected: self.input_shape().to_vec(),
                actual: point.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Output channels each value must provide so that `channels` of the
    /// block output are exact. `None` means every channel.
    fn needed_rows(&self, channels: Option<&[usize]>) -> Vec<Option<BTreeSet<usize>>> {
        let g = self.graph;
        let mut need: Vec<Option<Option<BTreeSet<usize>>>> = vec![None; g.values().len()];
        need[self.to.0] = Some(channels.map(|c| c.iter().copied().collect()));
        fn merge(slot: &mut Option<Option<BTreeSet<usize>>>, add: Option<BTreeSet<usize>>) {
            *slot = Some(match (slot.take(), add) {
                (None, add) => add,
                (Some(None), _) | (_, None) => None,
                (Some(Some(mut a)), Some(b)) => {
                    a.extend(b);
                    Some(a)
                }
            });
        }
        for &i in self.nodes.iter().rev() {
            let node = &g.nodes()[i];
            let Some(out_need) = need[node.output.0].clone() else {
                continue;
            };
            match &node.op {
                Op::Relu
                | Op::BatchNorm(_)
                | Op::MaxPool(_)
                | Op::AveragePool(_)
                | Op::GlobalAveragePool
                | Op::Add => {
                    for v in &node.inputs {
                        merge(&mut need[v.0], out_need.clone());
                    }
                }
                Op::Flatten => {
                    let spatial: usize = g.value(node.inputs[0]).shape.iter().skip(1).product();
                    merge(&mut need[node.inputs[0].0], if spatial == 1 { out_need } else { None });
                }
                Op::Concat => {
                    let mut offset = 0;
                    for v in &node.inputs {
                        let c = g.value(*v).shape[0];
                        let part = out_need
                            .as_ref()
                            .map(|set| set.range(offset..offset + c).map(|x| x - offset).collect());
                        merge(&mut need[v.0], part);
                        offset += c;
                    }
                }
                Op::Conv(_) | Op::Gemm(_) => merge(&mut need[node.inputs[0].0], None),
            }
        }
        need.into_iter().map(|n| n.flatten()).collect()
    }

    fn rows_for(&self, need: &[Option<BTreeSet<usize>>], v: ValueId) -> Option<Vec<usize>> {
        need.get(v.0)?.as_ref().map(|s| s.iter().copied().collect())
    }

    fn run(&self, point: &Tensor, masks: &[KnockoutMask], need: Option<&[Option<BTreeSet<usize>>]>) -> Vec<Option<Tensor>> {
        let mut values: Vec<Option<Tensor>> = vec![None; self.graph.values().len()];
        let mut x = point.clone();
        apply_masks(masks, self.from, &mut x);
        values[self.from.0] = Some(x);
        for &i in &self.nodes {
            let node = &self.graph.nodes()[i];
            let ins: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|v| values[v.0].as_ref().expect("block inputs computed"))
                .collect();
            let rows = need.and_then(|n| self.rows_for(n, node.output));
            let shape = &self.graph.value(node.output).shape;
            let mut out = kernels::forward(self.graph, &node.op, &ins, shape, rows.as_deref());
            apply_masks(masks, node.output, &mut out);
            values[node.output.0] = Some(out);
        }
        values
    }

    pub fn forward(&self, point: &Tensor) -> Result<Tensor> {
        self.forward_masked(point, &[])
    }

    /// Forward with knockouts applied at `from` or any value inside the block.
    pub fn forward_masked(&self, point: &Tensor, masks: &[KnockoutMask]) -> Result<Tensor> {
        self.check_point(point)?;
        for m in masks {
            m.validate(self.graph)?;
        }
        let mut values = self.run(point, masks, None);
        Ok(values[self.to.0].take().expect("block output"))
    }

    /// Like [`Block::forward_masked`], but only `channels` of the output are
    /// computed; every other output channel is zero. Convolutions and Gemms
    /// feeding the output skip the rows that cannot reach those channels.
    pub fn forward_channels(&self, point: &Tensor, masks: &[KnockoutMask], channels: &[usize]) -> Result<Tensor> {
        self.check_point(point)?;
        for m in masks {
            m.validate(self.graph)?;
        }
        self.check_channels(channels)?;
        let need = self.needed_rows(Some(channels));
        let mut values = self.run(point, masks, Some(&need));
        let mut out = values[self.to.0].take().expect("block output");
        if !out.shape().is_empty() {
            let keep: BTreeSet<usize> = channels.iter().copied().collect();
            for c in 0..out.channels() {
                if !keep.contains(&c) {
                    out.channel_mut(c).fill(0.0);
                }
            }
        }
        Ok(out)
    }

    fn check_channels(&self, channels: &[usize]) -> Result<()> {
        let width = self.output_shape().first().copied().unwrap_or(1);
        if let Some(&bad) = channels.iter().find(|&&c| c >= width) {
            return Err(Error::ChannelOutOfRange {
                value: self.graph.value(self.to).name.clone(),
                index: bad,
                width,
            });
        }
        Ok(())
    }

    /// `Jᵀ·cotangent` for the block, evaluated at `point`.
    pub fn vjp(&self, point: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
        self.check_point(point)?;
        if cotangent.shape() != self.output_shape() {
            return Err(Error::ShapeMismatch {
                expected: self.output_shape().to_vec(),
                actual: cotangent.shape().to_vec(),
            });
        }
        Ok(self.vjp_unchecked(point, cotangent, None))
    }

    /// VJP where `need` (from [`Block::needed_rows`]) covers every output
    /// channel on which the cotangent is nonzero.
    fn vjp_unchecked(&self, point: &Tensor, cotangent: &Tensor, need: Option<&[Option<BTreeSet<usize>>]>) -> Tensor {
        let values = self.run(point, &[], need);
        let mut grads: Vec<Option<Tensor>> = vec![None; values.len()];
        grads[self.to.0] = Some(cotangent.clone());
        for &i in self.nodes.iter().rev() {
            let node = &self.graph.nodes()[i];
            let Some(gy) = grads[node.output.0].take() else {
                continue;
            };
            let ins: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|v| values[v.0].as_ref().expect("forward values"))
                .collect();
            let rows = need.and_then(|n| self.rows_for(n, node.output));
            let gxs = kernels::backward(self.graph, &node.op, &ins, &gy, rows.as_deref());
            for (v, gx) in node.inputs.iter().zip(gxs) {
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, g) in acc.data_mut().iter_mut().zip(gx.data()) {
                            *a += g;
                        }
                    }
                    slot => *slot = Some(gx),
                }
            }
        }
        grads[self.from.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.input_shape()))
    }
}

/// Convenience wrapper around [`Block::vjp`].
pub fn vjp_block(
    graph: &ModelGraph,
    from: ValueId,
    to: ValueId,
    point: &Tensor,
    cotangent: &Tensor,
) -> Result<Tensor> {
    Block::new(graph, from, to)?.vjp(point, cotangent)
}

/// Integrated-gradients settings. The baseline is always all zeros.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IgConfig {
    pub steps: usize,
}

impl Default for IgConfig {
    fn default() -> Self {
        Self { steps: 50 }
    }
}

/// Cotangent selecting every element of one target channel (or unit).
pub fn target_cotangent(shape: &[usize], target: usize) -> Tensor {
    let mut cot = Tensor::zeros(shape);
    cot.channel_mut(target).fill(1.0);
    cot
}

impl Block<'_> {
    /// Per-element attribution of `x` (a value at `from`) to the sum of
    /// channel `target` at `to`, using a right-endpoint Riemann sum
    /// `x ⊙ (1/N) Σ_{n=1..N} ∇f(n·x/N)`.
    pub fn integrated_gradients(&self, x: &Tensor, target: usize, cfg: IgConfig) -> Result<Tensor> {
        if cfg.steps == 0 {
            return Err(Error::Config("integrated gradients needs at least one step".into()));
        }
        self.check_channels(&[target])?;
        self.check_point(x)?;
        let cot = target_cotangent(self.output_shape(), target);
        let need = self.needed_rows(Some(&[target]));
        let n = cfg.steps as f64;
        let mut acc = vec![0.0; x.len()];
        for step in 1..=cfg.steps {
            let g = self.vjp_unchecked(&x.scaled(step as f64 / n), &cot, Some(&need));
            for (a, v) in acc.iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        let data = acc
            .iter()
            .zip(x.data())
            .map(|(g, xv)| xv * (g / n))
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

pub fn integrated_gradients(
    graph: &ModelGraph,
    from: ValueId,
    to: ValueId,
    target: usize,
    x: &Tensor,
    cfg: IgConfig,
) -> Result<Tensor> {
    Block::new(graph, from, to)?.integrated_gradients(x, target, cfg)
}
