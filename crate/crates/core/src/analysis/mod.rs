//! Experiment harnesses, the group-confidence metric and image debugging.

mod experiments;
mod metric;
pub mod stats;

pub use experiments::*;
pub use metric::*;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attribution::IntegratedGradients;
use crate::concepts::Probe;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::model_io::TapSpec;
use crate::patching::{class_dataset, PatchDataset};

/// A model, its taps and one probing dataset per class.
pub struct Workbench<'g> {
    pub graph: &'g ModelGraph,
    pub taps: TapSpec,
    pub datasets: Vec<PatchDataset>,
    pub config: RunConfig,
}

impl<'g> Workbench<'g> {
    pub fn new(graph: &'g ModelGraph, taps: TapSpec, datasets: Vec<PatchDataset>, config: RunConfig) -> Result<Self> {
        config.validate()?;
        if datasets.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            graph,
            taps,
            datasets,
            config,
        })
    }

    /// Builds `D_c` from `dir` for every class in `classes`.
    pub fn load(graph: &'g ModelGraph, taps: TapSpec, dir: &Path, classes: &[usize], config: RunConfig) -> Result<Self> {
        let datasets = classes
            .iter()
            .map(|&c| class_dataset(graph, dir, c, &config.patches))
            .collect::<Result<Vec<_>>>()?;
        Self::new(graph, taps, datasets, config)
    }

    pub fn classes(&self) -> Vec<usize> {
        self.datasets.iter().map(|d| d.manifest.class).collect()
    }

    pub fn probe(&self, slot: usize) -> Result<Probe<'g>> {
        Probe::new(self.graph, &self.taps, &self.datasets[slot])
    }

    pub fn scorer(&self) -> IntegratedGradients {
        IntegratedGradients::new(self.config.ig_steps)
    }

    /// Name of the layer feeding `tap`.
    pub fn source_name(&self, tap: usize) -> String {
        match tap {
            0 => self.graph.value(self.graph.input()).name.clone(),
            t => self.taps.taps()[t - 1].name.clone(),
        }
    }

    pub fn source_width(&self, tap: usize) -> usize {
        match tap {
            0 => self.graph.input_shape()[0],
            t => self.taps.taps()[t - 1].width,
        }
    }

    /// Core-set size for targets at `tap`.
    pub fn tau(&self, tap: usize) -> usize {
        self.config.tau_for(&self.source_name(tap), self.source_width(tap))
    }

    pub fn tap_index(&self, name: &str) -> Result<usize> {
        Ok(self.taps.by_name(name)?.id)
    }
}

/// One neuron whose concept an experiment studies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Target {
    pub class: usize,
    pub tap: usize,
    pub neuron: usize,
}

/// Independent stream per (seed, salt, slot), so adding classes does not
/// change the draws of earlier ones.
pub(crate) fn rng_for(seed: u64, salt: u64, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(slot as u64);
    rng
}

/// Draws up to `n` live targets from `taps` of one class's probe. A target
/// is live when some patch activates it.
pub(crate) fn sample_targets(probe: &Probe, class: usize, taps: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Target>> {
    let mut pool: Vec<(usize, usize)> = taps
        .iter()
        .flat_map(|&t| (0..probe.width(t)).map(move |n| (t, n)))
        .collect();
    pool.shuffle(rng);
    let mut out = Vec::new();
    for (tap, neuron) in pool {
        if out.len() == n {
            break;
        }
        if probe.max_activation(tap, neuron)? > 0.0 {
            out.push(Target { class, tap, neuron });
        }
    }
    Ok(out)
}

/// Splits `total` items over `slots` as evenly as possible, earlier slots
/// taking the remainder.
pub(crate) fn share(total: usize, slots: usize, slot: usize) -> usize {
    total / slots + usize::from(slot < total % slots)
}
