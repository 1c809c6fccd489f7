//! Neuron activations, top-k concepts, knockout concepts and the retention
//! loss between them.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{forward_with_taps, Block, KnockoutMask};
use crate::error::{Error, Result};
use crate::graph::{ModelGraph, ValueId};
use crate::model_io::TapSpec;
use crate::patching::PatchDataset;
use crate::tensor::Tensor;

/// `φ_a`: spatial mean of channel `neuron` for `[C,H,W]` values, the raw
/// unit for `[F]` values.
pub fn neuron_activation(acts: &Tensor, neuron: usize) -> Result<f64> {
    let width = acts.channels();
    if neuron >= width {
        return Err(Error::ChannelOutOfRange {
            value: "activation".into(),
            index: neuron,
            width,
        });
    }
    if acts.shape().len() <= 1 {
        return Ok(acts.data()[neuron]);
    }
    let ch = acts.channel(neuron);
    Ok(ch.iter().sum::<f64>() / ch.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptMember {
    pub patch: u64,
    pub activation: f64,
}

/// `V_a`: the `k` patches with the highest activation, highest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub neuron: usize,
    pub k: usize,
    pub members: Vec<ConceptMember>,
}

impl Concept {
    pub fn patch_ids(&self) -> Vec<u64> {
        self.members.iter().map(|m| m.patch).collect()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Top `k` by activation; equal activations keep ascending patch id order.
pub fn top_k(scores: impl IntoIterator<Item = (u64, f64)>, k: usize) -> Vec<ConceptMember> {
    let mut all: Vec<ConceptMember> = scores
        .into_iter()
        .map(|(patch, activation)| ConceptMember { patch, activation })
        .collect();
    all.sort_by(|a, b| b.activation.total_cmp(&a.activation).then(a.patch.cmp(&b.patch)));
    all.truncate(k);
    all
}

/// `|V_a^{S̄} ∩ V_a| / |V_a|`: the share of the original concept that
/// survives the knockout.
pub fn concept_loss(original: &Concept, knocked_out: &Concept) -> f64 {
    if original.is_empty() {
        return 1.0;
    }
    let kept: BTreeSet<u64> = knocked_out.members.iter().map(|m| m.patch).collect();
    let shared = original.members.iter().filter(|m| kept.contains(&m.patch)).count();
    shared as f64 / original.len() as f64
}

/// Cached activations of every patch at every tap.
///
/// Level 0 is the graph input; level `t + 1` is tap `t`. A tap's source
/// (the layer whose channels are its candidate core neurons) is the level
/// just below it, so tap `t` reads from level `t`.
pub struct Probe<'g> {
    graph: &'g ModelGraph,
    taps: TapSpec,
    ids: Vec<u64>,
    values: Vec<Vec<Tensor>>,
    means: Vec<Vec<Vec<f64>>>,
}

impl<'g> Probe<'g> {
    pub fn new(graph: &'g ModelGraph, taps: &TapSpec, dataset: &PatchDataset) -> Result<Self> {
        Self::from_inputs(
            graph,
            taps,
            dataset.patches.iter().map(|p| (p.id, p.pixels.clone())).collect(),
        )
    }

    /// Builds a probe from `(patch id, input tensor)` pairs sorted by id.
    pub fn from_inputs(graph: &'g ModelGraph, taps: &TapSpec, inputs: Vec<(u64, Tensor)>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if inputs.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config("probe inputs must have strictly ascending ids".into()));
        }
        let tap_ids: Vec<ValueId> = taps.taps().iter().map(|t| t.value).collect();
        let per_patch: Vec<Vec<Tensor>> = inputs
            .par_iter()
            .map(|(_, x)| {
                let out = forward_with_taps(graph, x, &tap_ids, &[])?;
                let mut levels = Vec::with_capacity(tap_ids.len() + 1);
                levels.push(x.clone());
                levels.extend(out.taps);
                Ok(levels)
            })
            .collect::<Result<_>>()?;
        let levels = tap_ids.len() + 1;
        let mut values: Vec<Vec<Tensor>> = (0..levels).map(|_| Vec::with_capacity(inputs.len())).collect();
        for patch in per_patch {
            for (l, t) in patch.into_iter().enumerate() {
                values[l].push(t);
            }
        }
        let means = values
            .iter()
            .map(|level| level.iter().map(channel_activations).collect())
            .collect();
        Ok(Self {
            graph,
            taps: taps.clone(),
            ids: inputs.into_iter().map(|(id, _)| id).collect(),
            values,
            means,
        })
    }

    pub fn graph(&self) -> &'g ModelGraph {
        self.graph
    }

    pub fn taps(&self) -> &TapSpec {
        &self.taps
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: u64) -> Result<usize> {
        self.ids.binary_search(&id).map_err(|_| Error::UnknownPatch(id))
    }

    fn check_tap(&self, tap: usize) -> Result<()> {
        if tap >= self.taps.len() {
            return Err(Error::UnknownValue(format!("tap #{tap}")));
        }
        Ok(())
    }

    /// Width of tap `tap`.
    pub fn width(&self, tap: usize) -> usize {
        self.taps.taps()[tap].width
    }

    /// Width of the layer feeding tap `tap` (the input channels for tap 0).
    pub fn source_width(&self, tap: usize) -> usize {
        self.source_value(tap)
            .map_or(0, |v| self.graph.value(v).shape.first().copied().unwrap_or(1))
    }

    fn source_value(&self, tap: usize) -> Result<ValueId> {
        self.check_tap(tap)?;
        Ok(match tap {
            0 => self.graph.input(),
            t => self.taps.taps()[t - 1].value,
        })
    }

    /// The sub-network from the source layer of `tap` to `tap`.
    pub fn block(&self, tap: usize) -> Result<Block<'g>> {
        Block::new(self.graph, self.source_value(tap)?, self.taps.taps()[tap].value)
    }

    /// Source-layer activations of patch `index` for `tap`.
    pub fn source_point(&self, tap: usize, index: usize) -> &Tensor {
        &self.values[tap][index]
    }

    /// Activations of patch `index` at `tap` itself.
    pub fn tap_point(&self, tap: usize, index: usize) -> &Tensor {
        &self.values[tap + 1][index]
    }

    /// Per-channel means of the source layer for one patch (the
    /// representative vector used to cluster `tap`'s concepts).
    pub fn representative(&self, tap: usize, index: usize) -> &[f64] {
        &self.means[tap][index]
    }

    /// Channel means of patch `index` at probe level `level` (0 is the
    /// input, `t + 1` is tap `t`).
    pub fn level_means(&self, level: usize, index: usize) -> &[f64] {
        &self.means[level][index]
    }

    /// Largest channel mean of every neuron at probe level `level`.
    pub fn level_maxima(&self, level: usize) -> Vec<f64> {
        let width = self.means[level].first().map_or(0, Vec::len);
        (0..width)
            .map(|c| self.means[level].iter().map(|m| m[c]).fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    /// `φ_neuron` of every patch, in id order.
    pub fn activations(&self, tap: usize, neuron: usize) -> Result<Vec<f64>> {
        self.check_tap(tap)?;
        let width = self.width(tap);
        if neuron >= width {
            return Err(Error::ChannelOutOfRange {
                value: self.taps.taps()[tap].name.clone(),
                index: neuron,
                width,
            });
        }
        Ok(self.means[tap + 1].iter().map(|m| m[neuron]).collect())
    }

    /// Largest activation of `neuron` over the dataset.
    pub fn max_activation(&self, tap: usize, neuron: usize) -> Result<f64> {
        Ok(self.activations(tap, neuron)?.into_iter().fold(f64::NEG_INFINITY, f64::max))
    }

    pub fn concept(&self, tap: usize, neuron: usize, k: usize) -> Result<Concept> {
        let acts = self.activations(tap, neuron)?;
        Ok(Concept {
            neuron,
            k,
            members: top_k(self.ids.iter().copied().zip(acts), k),
        })
    }

    /// Activations of `neurons` at `tap` with `knockout` zeroed in the
    /// source layer, as `[neuron][patch]`.
    pub fn knockout_activations(&self, tap: usize, knockout: &BTreeSet<usize>, neurons: &[usize]) -> Result<Vec<Vec<f64>>> {
        let block = self.block(tap)?;
        let mask = [KnockoutMask {
            at: block.from(),
            channels: knockout.clone(),
        }];
        let outs: Vec<Tensor> = self.values[tap]
            .par_iter()
            .map(|x| block.forward_channels(x, &mask, neurons))
            .collect::<Result<_>>()?;
        neurons
            .iter()
            .map(|&n| outs.iter().map(|t| neuron_activation(t, n)).collect())
            .collect()
    }

    /// `V_a^{S̄}` (Def. 1 evaluated on the model with `knockout` zeroed).
    pub fn knockout_concept(&self, tap: usize, neuron: usize, knockout: &BTreeSet<usize>, k: usize) -> Result<Concept> {
        if knockout.is_empty() {
            return self.concept(tap, neuron, k);
        }
        let acts = self.knockout_activations(tap, knockout, &[neuron])?.remove(0);
        Ok(Concept {
            neuron,
            k,
            members: top_k(self.ids.iter().copied().zip(acts), k),
        })
    }

    /// `L(S, a)` for neuron `neuron` at `tap` and knockout `S` in its source layer.
    pub fn concept_loss(&self, tap: usize, neuron: usize, knockout: &BTreeSet<usize>, k: usize) -> Result<f64> {
        let original = self.concept(tap, neuron, k)?;
        let knocked = self.knockout_concept(tap, neuron, knockout, k)?;
        Ok(concept_loss(&original, &knocked))
    }
}

/// Channel means of a `[C,H,W]` value, or the raw units of an `[F]` value.
pub fn channel_activations(t: &Tensor) -> Vec<f64> {
    if t.shape().len() <= 1 {
        t.data().to_vec()
    } else {
        t.channel_means()
    }
}
