//! Captions for neuron groups from a multimodal language model.
//!
//! Two request kinds exist: a caption request for one group's exemplar
//! patches, and a relation request that pairs a parent group with its
//! children so the model can explain how lower features combine. Transport
//! is pluggable through [`LabelClient`]; answers are parsed line by line and
//! the raw text is always kept.

mod client;
mod parse;
pub mod prompts;

pub use client::{CachedClient, HttpClient, HttpConfig, LabelClient, MockClient};
pub use parse::{parse_answer, Evolution, GroupFeatures, ParsedAnswer};

use std::collections::BTreeMap;

use base64::Engine as _;
use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::circuit::{CircuitFile, Group};
use crate::error::{Error, Result};
use crate::patching::png_bytes;

/// Exemplar images sent per group.
pub const MAX_EXEMPLARS: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Caption,
    Relation,
}

/// One group's exemplars as base64 PNG, in concept order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExemplarSet {
    pub group: Option<usize>,
    pub images: Vec<String>,
}

/// Provider-neutral message part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Part {
    Text { text: String },
    Image { media_type: String, data: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRequest {
    pub kind: RequestKind,
    pub prompt: String,
    /// Group 1 first; for relation requests the children follow by
    /// descending `|W|`.
    pub exemplars: Vec<ExemplarSet>,
}

impl LabelRequest {
    /// Prompt text, then each group's images. Relation requests put a
    /// `Group i:` marker before each group's images.
    pub fn parts(&self) -> Vec<Part> {
        let mut parts = vec![Part::Text { text: self.prompt.clone() }];
        for (i, set) in self.exemplars.iter().enumerate() {
            if self.kind == RequestKind::Relation {
                parts.push(Part::Text {
                    text: format!("Group {}:", i + 1),
                });
            }
            parts.extend(set.images.iter().map(|data| Part::Image {
                media_type: "image/png".into(),
                data: data.clone(),
            }));
        }
        parts
    }

    /// Hex SHA-256 of the request's canonical JSON; the response cache key.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelResult {
    pub request_hash: String,
    pub raw: String,
    pub parsed: ParsedAnswer,
    /// True when no nonempty caption could be found.
    pub parse_failed: bool,
}

impl LabelResult {
    pub fn caption(&self) -> Option<&str> {
        self.parsed.caption.as_deref().filter(|c| !c.is_empty())
    }
}

fn encode_set(group: Option<usize>, images: &[RgbImage]) -> Result<ExemplarSet> {
    if images.is_empty() {
        return Err(Error::EmptyConcept);
    }
    let images = images
        .iter()
        .take(MAX_EXEMPLARS)
        .map(|img| Ok(base64::engine::general_purpose::STANDARD.encode(png_bytes(img)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExemplarSet { group, images })
}

fn prompt(form: &str) -> String {
    [prompts::ROLE, prompts::MAIN, form].join("\n\n")
}

/// Caption request for one group; at most [`MAX_EXEMPLARS`] images are kept.
pub fn build_caption_prompt(group: Option<usize>, exemplars: &[RgbImage]) -> Result<LabelRequest> {
    Ok(LabelRequest {
        kind: RequestKind::Caption,
        prompt: prompt(prompts::CAPTION_FORM),
        exemplars: vec![encode_set(group, exemplars)?],
    })
}

/// A child group offered to a relation request.
#[derive(Clone, Debug)]
pub struct ChildExemplars {
    pub group: usize,
    /// `W(child, parent)`.
    pub weight: f64,
    pub images: Vec<RgbImage>,
}

/// Relation request: the parent is Group 1, children follow by descending
/// `|W|`, ties by group id.
pub fn build_relation_prompt(parent: (usize, &[RgbImage]), children: &[ChildExemplars]) -> Result<LabelRequest> {
    if children.is_empty() {
        return Err(Error::Config("a relation request needs at least one child group".into()));
    }
    let mut order: Vec<&ChildExemplars> = children.iter().collect();
    order.sort_by(|a, b| b.weight.abs().total_cmp(&a.weight.abs()).then(a.group.cmp(&b.group)));
    let mut exemplars = vec![encode_set(Some(parent.0), parent.1)?];
    for c in order {
        exemplars.push(encode_set(Some(c.group), &c.images)?);
    }
    Ok(LabelRequest {
        kind: RequestKind::Relation,
        prompt: prompt(prompts::RELATION_FORM),
        exemplars,
    })
}

/// Sends one request and parses the answer. Parse problems are reported in
/// the result; only transport errors are returned as `Err`.
pub fn label_group(request: &LabelRequest, client: &dyn LabelClient) -> Result<LabelResult> {
    let raw = client.complete(request)?;
    let parsed = parse_answer(&raw);
    let parse_failed = parsed.caption.as_deref().is_none_or(str::is_empty);
    Ok(LabelResult {
        request_hash: request.hash(),
        raw,
        parsed,
        parse_failed,
    })
}

/// Up to `n` patches of `V_G` in concept order: by the best rank any member
/// neuron gives the patch in its own concept, then by patch id.
pub fn exemplar_patches(circuit: &CircuitFile, group: &Group, n: usize) -> Vec<u64> {
    let mut best: BTreeMap<u64, usize> = group.patches.iter().map(|&p| (p, usize::MAX)).collect();
    for node in circuit.nodes.iter().filter(|nd| nd.level == group.level && group.neurons.contains(&nd.neuron)) {
        for (rank, m) in node.concept.iter().enumerate() {
            if let Some(r) = best.get_mut(&m.patch) {
                *r = (*r).min(rank);
            }
        }
    }
    let mut ranked: Vec<(usize, u64)> = best.into_iter().map(|(p, r)| (r, p)).collect();
    ranked.sort();
    ranked.into_iter().take(n).map(|(_, p)| p).collect()
}

/// Grid of equally sized tiles, `cols` wide, for providers that accept a
/// single image per group.
pub fn tile_exemplars(images: &[RgbImage], cols: u32) -> Option<RgbImage> {
    let first = images.first()?;
    let (w, h) = first.dimensions();
    let cols = cols.max(1).min(images.len() as u32);
    let rows = (images.len() as u32).div_ceil(cols);
    let mut sheet = RgbImage::new(w * cols, h * rows);
    for (i, img) in images.iter().enumerate() {
        let tile = if img.dimensions() == (w, h) {
            img.clone()
        } else {
            imageops::resize(img, w, h, imageops::FilterType::Triangle)
        };
        let (x, y) = ((i as u32 % cols) * w, (i as u32 / cols) * h);
        imageops::replace(&mut sheet, &tile, x as i64, y as i64);
    }
    Some(sheet)
}

/// Results of labeling a whole circuit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitLabels {
    pub captions: BTreeMap<usize, LabelResult>,
    /// Keyed by parent group id.
    pub relations: BTreeMap<usize, LabelResult>,
}

/// Captions every group, then explains each parent from its children,
/// issuing requests one at a time. Parsed captions become group labels and
/// the circuit is resealed. `images` maps a patch id to its pixels.
pub fn label_circuit(
    circuit: &mut CircuitFile,
    images: &dyn Fn(u64) -> Result<RgbImage>,
    client: &dyn LabelClient,
    max_children: usize,
) -> Result<CircuitLabels> {
    let mut exemplars: BTreeMap<usize, Vec<RgbImage>> = BTreeMap::new();
    for g in &circuit.groups {
        let ids = exemplar_patches(circuit, g, MAX_EXEMPLARS);
        exemplars.insert(g.id, ids.into_iter().map(images).collect::<Result<_>>()?);
    }
    let mut captions = BTreeMap::new();
    for g in &circuit.groups {
        let ex = &exemplars[&g.id];
        if ex.is_empty() {
            log::warn!("group {} has no exemplar patches; not labeled", g.id);
            continue;
        }
        captions.insert(g.id, label_group(&build_caption_prompt(Some(g.id), ex)?, client)?);
    }
    let mut relations = BTreeMap::new();
    for g in &circuit.groups {
        let mut children: Vec<ChildExemplars> = circuit
            .group_edges
            .iter()
            .filter(|e| e.parent == g.id && !exemplars[&e.child].is_empty())
            .map(|e| ChildExemplars {
                group: e.child,
                weight: e.weight,
                images: exemplars[&e.child].clone(),
            })
            .collect();
        if children.is_empty() || exemplars[&g.id].is_empty() {
            continue;
        }
        children.sort_by(|a, b| b.weight.abs().total_cmp(&a.weight.abs()).then(a.group.cmp(&b.group)));
        children.truncate(max_children.max(1));
        let request = build_relation_prompt((g.id, &exemplars[&g.id]), &children)?;
        relations.insert(g.id, label_group(&request, client)?);
    }
    for g in circuit.groups.iter_mut() {
        if let Some(c) = captions.get(&g.id).and_then(LabelResult::caption) {
            g.label = Some(c.to_string());
        }
    }
    circuit.reseal();
    Ok(CircuitLabels { captions, relations })
}
