//! Group confidence `M(v, S_G, D)`, per-crop image debugging and logit-drop
//! ranking.

use std::collections::{BTreeMap, BTreeSet};

use image::{imageops, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::circuit::{CircuitFile, Group, Level};
use crate::concepts::{channel_activations, Probe};
use crate::engine::{forward_with_taps, KnockoutMask};
use crate::error::{Error, Result};
use crate::graph::{ModelGraph, ValueId};
use crate::grouping::euclidean;
use crate::patching::{crop_rects, patch_id, resize_bilinear, tensor_image, PatchConfig, Rect};
use crate::tensor::Tensor;

/// Floor applied to activations before taking logs.
pub const EPSILON: f64 = 1e-12;

/// Representative neurons kept per group.
pub const REPRESENTATIVES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    /// Patch or crop id.
    pub patch: u64,
    pub group: usize,
    pub value: f64,
    /// Neurons left out because their dataset maximum is not positive.
    pub excluded: Vec<usize>,
}

/// Geometric mean of `φ_s / max_s` over `neurons`, with `φ_s` clamped to
/// `[ε, max_s]`. Returns the value and the excluded neurons; the value is
/// 0 when every neuron is excluded.
pub fn confidence(phi: &[f64], maxima: &[f64], neurons: &[usize]) -> (f64, Vec<usize>) {
    let mut logs = Vec::with_capacity(neurons.len());
    let mut excluded = Vec::new();
    for &s in neurons {
        let max = maxima[s];
        if max <= 0.0 || !max.is_finite() {
            excluded.push(s);
            continue;
        }
        logs.push((phi[s].clamp(EPSILON, max) / max).ln());
    }
    if logs.is_empty() {
        return (0.0, excluded);
    }
    ((logs.iter().sum::<f64>() / logs.len() as f64).exp(), excluded)
}

/// `S'_G`: up to `n` neurons of the group whose nearest semantic group lies
/// closest (l2) to the group centroid, ties by neuron id. The centroid is
/// the mean of the group's semantic-group representatives. Neurons without
/// a semantic group rank last.
pub fn representative_neurons(circuit: &CircuitFile, group: &Group, n: usize) -> Vec<usize> {
    let reps: Vec<(usize, &[f64])> = circuit
        .semantic_groups
        .iter()
        .filter(|sg| sg.level == group.level && group.semantic_groups.contains(&(sg.group.owner, sg.group.index)))
        .map(|sg| (sg.group.owner, sg.group.representative.as_slice()))
        .collect();
    let mut ranked: Vec<(f64, usize)> = if reps.is_empty() {
        group.neurons.iter().map(|&s| (0.0, s)).collect()
    } else {
        let dim = reps[0].1.len();
        let mut centroid = vec![0.0; dim];
        for (_, r) in &reps {
            for (c, v) in centroid.iter_mut().zip(*r) {
                *c += v;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= reps.len() as f64);
        group
            .neurons
            .iter()
            .map(|&s| {
                let d = reps
                    .iter()
                    .filter(|(o, _)| *o == s)
                    .map(|(_, r)| euclidean(r, &centroid))
                    .fold(f64::INFINITY, f64::min);
                (d, s)
            })
            .collect()
    };
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    ranked.into_iter().take(n).map(|(_, s)| s).collect()
}

/// Activation value a circuit level reads from.
pub fn level_value(graph: &ModelGraph, level: &Level) -> Result<ValueId> {
    if level.input {
        Ok(graph.input())
    } else {
        graph.value_id(&level.name)
    }
}

/// Union of the groups' neurons, one mask per level. Repeated ids count once.
pub fn group_masks(graph: &ModelGraph, circuit: &CircuitFile, groups: &[usize]) -> Result<Vec<KnockoutMask>> {
    let mut per_level: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for &id in groups {
        let g = circuit.group(id)?;
        per_level.entry(g.level).or_default().extend(&g.neurons);
    }
    per_level
        .into_iter()
        .map(|(l, set)| Ok(KnockoutMask::new(level_value(graph, &circuit.levels[l])?, set)))
        .collect()
}

/// Scores inputs against a circuit's groups, with maxima taken over a probe
/// dataset.
pub struct ConfidenceModel<'a> {
    graph: &'a ModelGraph,
    circuit: &'a CircuitFile,
    values: Vec<ValueId>,
    maxima: Vec<Vec<f64>>,
    representatives: BTreeMap<usize, Vec<usize>>,
}

impl<'a> ConfidenceModel<'a> {
    pub fn new(circuit: &'a CircuitFile, probe: &Probe<'a>) -> Result<Self> {
        let mut maxima = Vec::new();
        for level in &circuit.levels {
            let l = if level.input { 0 } else { probe.taps().by_name(&level.name)?.id + 1 };
            maxima.push(probe.level_maxima(l));
        }
        Self::with_maxima(probe.graph(), circuit, maxima)
    }

    /// Builds the model from per-level maxima computed earlier, one vector
    /// per circuit level.
    pub fn with_maxima(graph: &'a ModelGraph, circuit: &'a CircuitFile, maxima: Vec<Vec<f64>>) -> Result<Self> {
        if maxima.len() != circuit.levels.len() || maxima.iter().zip(&circuit.levels).any(|(m, l)| m.len() != l.width) {
            return Err(Error::ShapeMismatch {
                expected: circuit.levels.iter().map(|l| l.width).collect(),
                actual: maxima.iter().map(Vec::len).collect(),
            });
        }
        let values = circuit.levels.iter().map(|l| level_value(graph, l)).collect::<Result<_>>()?;
        let representatives = circuit
            .groups
            .iter()
            .map(|g| (g.id, representative_neurons(circuit, g, REPRESENTATIVES)))
            .collect();
        Ok(Self {
            graph,
            circuit,
            values,
            maxima,
            representatives,
        })
    }

    /// Per-level activation maxima over the probe dataset.
    pub fn maxima(&self) -> &[Vec<f64>] {
        &self.maxima
    }

    pub fn circuit(&self) -> &CircuitFile {
        self.circuit
    }

    pub fn representatives(&self, group: usize) -> Result<&[usize]> {
        self.representatives.get(&group).map(Vec::as_slice).ok_or(Error::UnknownGroup(group))
    }

    pub fn level_by_name(&self, name: &str) -> Result<usize> {
        self.circuit
            .levels
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownValue(name.to_string()))
    }

    /// `M` for one group given the channel means `phi` at the group's level.
    pub fn score(&self, patch: u64, group: usize, phi: &[f64]) -> Result<MetricScore> {
        let g = self.circuit.group(group)?;
        let (value, excluded) = confidence(phi, &self.maxima[g.level], self.representatives(group)?);
        Ok(MetricScore {
            patch,
            group,
            value,
            excluded,
        })
    }

    /// Channel means at `level` for one model-sized input.
    pub fn level_activations(&self, input: &Tensor, level: usize) -> Result<Vec<f64>> {
        let out = forward_with_taps(self.graph, input, &[self.values[level]], &[])?;
        Ok(channel_activations(&out.taps[0]))
    }

    /// `M` of every probe patch for one group, in probe order.
    pub fn dataset_scores(&self, probe: &Probe, group: usize) -> Result<Vec<f64>> {
        let g = self.circuit.group(group)?;
        let lv = &self.circuit.levels[g.level];
        let level = if lv.input { 0 } else { probe.taps().by_name(&lv.name)?.id + 1 };
        (0..probe.len())
            .map(|i| Ok(self.score(probe.ids()[i], group, probe.level_means(level, i))?.value))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropScores {
    pub id: u64,
    pub scale: f64,
    pub rect: Rect,
    pub scores: Vec<MetricScore>,
    /// Groups whose threshold this crop exceeds.
    pub flagged: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DebugReport {
    pub level: String,
    pub groups: Vec<usize>,
    pub crops: Vec<CropScores>,
}

/// Crops `image` (`[3,H,W]`, any size) as the patch generator does and
/// scores each crop against every group at `level`. A crop is flagged for a
/// group when its score is strictly above that group's threshold; groups
/// without a threshold are never flagged.
pub fn debug_image(
    model: &ConfidenceModel,
    image: &Tensor,
    level: &str,
    thresholds: &BTreeMap<usize, f64>,
    patches: &PatchConfig,
) -> Result<DebugReport> {
    let (h, w) = match model.graph.input_shape() {
        [3, h, w] => (*h, *w),
        other => return Err(Error::InvalidModel(format!("debugging needs a [3,H,W] input, model takes {other:?}"))),
    };
    if image.shape().len() != 3 || image.shape()[0] != 3 {
        return Err(Error::ShapeMismatch {
            expected: vec![3, h, w],
            actual: image.shape().to_vec(),
        });
    }
    let li = model.level_by_name(level)?;
    let groups: Vec<usize> = model.circuit.groups.iter().filter(|g| g.level == li).map(|g| g.id).collect();
    let crops = crop_rects(image.shape()[2] as u32, image.shape()[1] as u32, patches)
        .into_iter()
        .map(|(scale, rect)| {
            let id = patch_id(0, scale, rect);
            let phi = model.level_activations(&resize_bilinear(image, rect, h, w), li)?;
            let scores = groups.iter().map(|&g| model.score(id, g, &phi)).collect::<Result<Vec<_>>>()?;
            let flagged = scores
                .iter()
                .filter(|s| thresholds.get(&s.group).is_some_and(|t| s.value > *t))
                .map(|s| s.group)
                .collect();
            Ok(CropScores {
                id,
                scale,
                rect,
                scores,
                flagged,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DebugReport {
        level: level.to_string(),
        groups,
        crops,
    })
}

/// The image with every flagged crop outlined in red; `None` when nothing
/// was flagged.
pub fn contact_sheet(image: &Tensor, report: &DebugReport) -> Option<RgbImage> {
    let flagged: Vec<&CropScores> = report.crops.iter().filter(|c| !c.flagged.is_empty()).collect();
    if flagged.is_empty() {
        return None;
    }
    let full = tensor_image(image);
    let thumb = full.height().min(full.width()).max(1);
    let cols = (flagged.len() as f64).sqrt().ceil() as u32;
    let rows = (flagged.len() as u32).div_ceil(cols);
    let mut sheet = RgbImage::from_pixel(full.width() + cols * thumb, full.height().max(rows * thumb), Rgb([0, 0, 0]));
    imageops::replace(&mut sheet, &full, 0, 0);
    for (i, c) in flagged.iter().enumerate() {
        outline(&mut sheet, c.rect);
        let crop = imageops::crop_imm(&full, c.rect.x, c.rect.y, c.rect.w, c.rect.h).to_image();
        let crop = imageops::resize(&crop, thumb, thumb, imageops::FilterType::Triangle);
        let (col, row) = (i as u32 % cols, i as u32 / cols);
        imageops::replace(&mut sheet, &crop, (full.width() + col * thumb) as i64, (row * thumb) as i64);
    }
    Some(sheet)
}

fn outline(img: &mut RgbImage, r: Rect) {
    let red = Rgb([255, 0, 0]);
    let (x1, y1) = ((r.x + r.w).saturating_sub(1), (r.y + r.h).saturating_sub(1));
    for x in r.x..=x1 {
        img.put_pixel(x, r.y, red);
        img.put_pixel(x, y1, red);
    }
    for y in r.y..=y1 {
        img.put_pixel(r.x, y, red);
        img.put_pixel(x1, y, red);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitDrop {
    pub image: u64,
    pub unmasked: f64,
    pub masked: f64,
    /// `unmasked − masked`.
    pub delta: f64,
}

/// Images ranked by how far `class`'s logit falls when the group's neurons
/// are zeroed, largest drop first, ties by image id. Inputs must already
/// have the model's input shape.
pub fn logit_drop_ranking(
    graph: &ModelGraph,
    circuit: &CircuitFile,
    group: usize,
    images: &[(u64, Tensor)],
    class: usize,
    top_n: usize,
) -> Result<Vec<LogitDrop>> {
    let masks = group_masks(graph, circuit, &[group])?;
    let width = graph.output_shape().iter().product::<usize>();
    if class >= width {
        return Err(Error::ChannelOutOfRange {
            value: graph.value(graph.output()).name.clone(),
            index: class,
            width,
        });
    }
    let mut out = images
        .iter()
        .map(|(id, x)| {
            let unmasked = forward_with_taps(graph, x, &[], &[])?.logits.data()[class];
            let masked = forward_with_taps(graph, x, &[], &masks)?.logits.data()[class];
            Ok(LogitDrop {
                image: *id,
                unmasked,
                masked,
                delta: unmasked - masked,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| b.delta.total_cmp(&a.delta).then(a.image.cmp(&b.image)));
    out.truncate(top_n);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confidence_trivial_cases() {
        let max = [2.0, 4.0, 1.0];
        assert_eq!(confidence(&[2.0, 4.0, 1.0], &max, &[0, 1, 2]).0, 1.0);
        assert_eq!(confidence(&[1.0, 2.0, 0.3], &max, &[0, 1]).0, 0.5);
        assert!(confidence(&[0.0, 4.0, 1.0], &max, &[0, 1]).0 <= 1e-2);
    }

    #[test]
    fn nonpositive_maxima_are_excluded() {
        let (v, ex) = confidence(&[1.0, -3.0], &[1.0, 0.0], &[0, 1]);
        assert_eq!((v, ex), (1.0, vec![1]));
        assert_eq!(confidence(&[1.0], &[0.0], &[0]), (0.0, vec![0]));
    }

    #[test]
    fn activations_above_the_maximum_clamp_to_one() {
        assert_eq!(confidence(&[9.0], &[3.0], &[0]).0, 1.0);
        assert!(confidence(&[-5.0], &[3.0], &[0]).0 > 0.0);
    }
}
