//! Importance scores between adjacent taps, core-neuron selection and branch
//! weights.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concepts::{Concept, Probe};
use crate::engine::{Block, IgConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Attribution of one patch's source activations to a target neuron,
/// reduced to one value per source channel.
pub trait Scorer: Send + Sync {
    fn contributions(&self, block: &Block, point: &Tensor, target: usize) -> Result<Vec<f64>>;
}

/// Integrated gradients with a zero baseline, summed per source channel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IntegratedGradients {
    pub config: IgConfig,
}

impl IntegratedGradients {
    pub fn new(steps: usize) -> Self {
        Self {
            config: IgConfig { steps },
        }
    }
}

impl Scorer for IntegratedGradients {
    fn contributions(&self, block: &Block, point: &Tensor, target: usize) -> Result<Vec<f64>> {
        let attr = block.integrated_gradients(point, target, self.config)?;
        Ok(if attr.shape().len() <= 1 {
            attr.into_data()
        } else {
            attr.channel_sums()
        })
    }
}

/// Per-patch, per-source-channel contributions to one target. Scores over
/// any subset of the patches are sums of rows, so one table serves both the
/// whole concept and each of its semantic groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub target: usize,
    pub patches: Vec<u64>,
    /// `rows[p][s]`: contribution of source channel `s` on patch `patches[p]`.
    pub rows: Vec<Vec<f64>>,
    pub sources: usize,
}

impl ImportanceTable {
    /// `T(a, s, V)` for every `s`, with `V` the whole table.
    pub fn scores(&self) -> Vec<f64> {
        self.sum_rows(|_| true)
    }

    /// `T(a, s, V)` for every `s`, with `V` restricted to `subset`.
    pub fn scores_over(&self, subset: &[u64]) -> Vec<f64> {
        let keep: BTreeSet<u64> = subset.iter().copied().collect();
        self.sum_rows(|id| keep.contains(&id))
    }

    fn sum_rows(&self, include: impl Fn(u64) -> bool) -> Vec<f64> {
        let mut out = vec![0.0; self.sources];
        for (id, row) in self.patches.iter().zip(&self.rows) {
            if include(*id) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        out
    }
}

/// Contributions of every source channel of `tap` to `target` over `patches`.
pub fn importance_table(
    probe: &Probe,
    tap: usize,
    target: usize,
    patches: &[u64],
    scorer: &dyn Scorer,
) -> Result<ImportanceTable> {
    let block = probe.block(tap)?;
    let sources = probe.source_width(tap);
    let indices = patches
        .iter()
        .map(|&id| probe.index_of(id))
        .collect::<Result<Vec<_>>>()?;
    let rows = indices
        .par_iter()
        .map(|&i| scorer.contributions(&block, probe.source_point(tap, i), target))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImportanceTable {
        target,
        patches: patches.to_vec(),
        rows,
        sources,
    })
}

/// `T(a, s_i, V)` for a single source neuron.
pub fn importance_score(
    probe: &Probe,
    tap: usize,
    target: usize,
    source: usize,
    patches: &[u64],
    scorer: &dyn Scorer,
) -> Result<f64> {
    let width = probe.source_width(tap);
    if source >= width {
        return Err(Error::ChannelOutOfRange {
            value: format!("source of tap #{tap}"),
            index: source,
            width,
        });
    }
    Ok(importance_table(probe, tap, target, patches, scorer)?.scores()[source])
}

/// Source ids ordered by descending `|T|`; equal magnitudes keep ascending id.
pub fn rank_by_magnitude(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].abs().total_cmp(&scores[a].abs()).then(a.cmp(&b)));
    order
}

/// `S_a`: the `τ` source neurons with the largest `|T|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoreSet {
    pub target: usize,
    pub tau: usize,
    pub neurons: Vec<usize>,
    /// Signed `T(a, s, V_a)` for each entry of `neurons`.
    pub scores: Vec<f64>,
}

impl CoreSet {
    pub fn from_scores(target: usize, scores: &[f64], tau: usize) -> Self {
        let neurons: Vec<usize> = rank_by_magnitude(scores).into_iter().take(tau).collect();
        let scores = neurons.iter().map(|&n| scores[n]).collect();
        Self {
            target,
            tau,
            neurons,
            scores,
        }
    }

    pub fn as_set(&self) -> BTreeSet<usize> {
        self.neurons.iter().copied().collect()
    }
}

/// Core-set selection for one target: its concept, the full score table
/// over that concept, and the top-`τ` sources.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub concept: Concept,
    pub table: ImportanceTable,
    pub core: CoreSet,
}

pub fn select_core_neurons(
    probe: &Probe,
    tap: usize,
    target: usize,
    tau: usize,
    k: usize,
    scorer: &dyn Scorer,
) -> Result<Selection> {
    if tau == 0 {
        return Err(Error::Config("tau must be at least 1".into()));
    }
    let concept = probe.concept(tap, target, k)?;
    let table = importance_table(probe, tap, target, &concept.patch_ids(), scorer)?;
    let core = CoreSet::from_scores(target, &table.scores(), tau);
    if core.neurons.is_empty() {
        return Err(Error::EmptyCoreSet(probe.taps().taps()[tap].name.clone()));
    }
    Ok(Selection { concept, table, core })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchWeight {
    pub child: usize,
    /// `T / Σ_{s∈S_a} |T|`, or 0 when the denominator vanishes.
    pub weight: f64,
    /// Raw signed score over the semantic group.
    pub score: f64,
    pub degenerate: bool,
}

/// Branch weights of every core neuron for one parent semantic group.
/// `scores` holds `T(a, s, V_{a,j})` indexed by source id.
pub fn branch_weights(core: &[usize], scores: &[f64]) -> Vec<BranchWeight> {
    let denom: f64 = core.iter().map(|&s| scores[s].abs()).sum();
    let degenerate = denom == 0.0 || !denom.is_finite();
    core.iter()
        .map(|&s| BranchWeight {
            child: s,
            weight: if degenerate { 0.0 } else { scores[s] / denom },
            score: scores[s],
            degenerate,
        })
        .collect()
}

/// Weight of a single child; `None` if `child` is not in the core set.
pub fn branch_weight(child: usize, core: &[usize], scores: &[f64]) -> Option<BranchWeight> {
    branch_weights(core, scores).into_iter().find(|b| b.child == child)
}
