//! Neuron hypertrees, concept circuits and the circuit file format.
//!
//! A circuit file is pretty-printed JSON:
//!
//! ```text
//! {
//!   "version": "1",
//!   "model_hash": <sha256 of the model's ONNX encoding>,
//!   "dataset_hash": <sha256 of the patch manifest>,
//!   "config": <RunConfig>,
//!   "class": c, "root": c,
//!   "levels": [{ "name", "width", "input" }],      bottom to top
//!   "nodes": [{ "level", "neuron", "concept", "tau", "core", "scores" }],
//!   "semantic_groups": [{ "level", "owner", "index", "patches", "representative" }],
//!   "edges": [{ "level", "parent", "child", "group", "weight", "score", "degenerate" }],
//!   "groups": [{ "id", "level", "neurons", "semantic_groups", "patches", "label" }],
//!   "group_edges": [{ "parent", "child", "weight" }],
//!   "checksum": <sha256 of the compact JSON of every other field>
//! }
//! ```
//!
//! Edges at level `l` join a parent at level `l` to a child at level `l - 1`.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{branch_weights, select_core_neurons, Scorer};
use crate::concepts::{ConceptMember, Probe};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::grouping::{form_neuron_groups, group_edge_weight, split_semantic_groups, GroupingConfig, SemanticGroup, WeightedEdge};
use crate::model_io::to_onnx_bytes;

pub const CIRCUIT_VERSION: &str = "1";

/// One layer of the circuit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub name: String,
    pub width: usize,
    /// True for the graph input, which only appears when the circuit has a
    /// single tap and the root's children are input channels.
    pub input: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub level: usize,
    pub neuron: usize,
    /// `V_a`; empty for input channels.
    pub concept: Vec<ConceptMember>,
    /// Core-set size used for this node's children; `None` for leaves.
    pub tau: Option<usize>,
    /// `S_a`, ordered by descending `|T|`.
    pub core: Vec<usize>,
    /// `T(a, s, V_a)` for every neuron `s` of the level below.
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSemanticGroup {
    pub level: usize,
    #[serde(flatten)]
    pub group: SemanticGroup,
}

/// `w(a, s, V_{a,j})` with its raw score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    /// Level of the parent.
    pub level: usize,
    pub parent: usize,
    pub child: usize,
    /// Index `j` of the parent's semantic group.
    pub group: usize,
    pub weight: f64,
    pub score: f64,
    pub degenerate: bool,
}

impl WeightedEdge for Edge {
    fn parent(&self) -> usize {
        self.parent
    }
    fn child(&self) -> usize {
        self.child
    }
    fn weight(&self) -> f64 {
        self.weight
    }
}

/// `H_c`: the neuron hypertree rooted at the class logit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronCircuit {
    pub class: usize,
    pub root: usize,
    pub levels: Vec<Level>,
    pub nodes: Vec<Node>,
    pub semantic_groups: Vec<LevelSemanticGroup>,
    pub edges: Vec<Edge>,
}

impl NeuronCircuit {
    pub fn top(&self) -> usize {
        self.levels.len() - 1
    }

    /// Neuron ids at `level`, ascending.
    pub fn neurons_at(&self, level: usize) -> Vec<usize> {
        self.nodes.iter().filter(|n| n.level == level).map(|n| n.neuron).collect()
    }

    pub fn node(&self, level: usize, neuron: usize) -> Option<&Node> {
        self.nodes.iter().find(|n| n.level == level && n.neuron == neuron)
    }

    pub fn semantic_groups_at(&self, level: usize) -> Vec<SemanticGroup> {
        self.semantic_groups
            .iter()
            .filter(|g| g.level == level)
            .map(|g| g.group.clone())
            .collect()
    }

    pub fn edges_at(&self, level: usize) -> Vec<&Edge> {
        self.edges.iter().filter(|e| e.level == level).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Group {
    /// Unique across the circuit.
    pub id: usize,
    pub level: usize,
    pub neurons: Vec<usize>,
    pub semantic_groups: Vec<(usize, usize)>,
    /// `V_G`, ascending patch ids.
    pub patches: Vec<u64>,
    pub label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEdge {
    pub parent: usize,
    pub child: usize,
    /// `W(G_child, G_parent)`.
    pub weight: f64,
}

/// `C_c`: neuron groups per level and the weights between them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptCircuit {
    pub class: usize,
    pub groups: Vec<Group>,
    pub group_edges: Vec<GroupEdge>,
}

impl ConceptCircuit {
    pub fn group(&self, id: usize) -> Result<&Group> {
        self.groups.iter().find(|g| g.id == id).ok_or(Error::UnknownGroup(id))
    }

    pub fn groups_at(&self, level: usize) -> impl Iterator<Item = &Group> {
        self.groups.iter().filter(move |g| g.level == level)
    }
}

/// Maps circuit levels to probe taps. With a single tap the input becomes
/// level 0 and the tap is level 1.
fn levels_for(probe: &Probe) -> (Vec<Level>, usize) {
    let taps = probe.taps().taps();
    let mut levels = Vec::new();
    let offset = usize::from(taps.len() == 1);
    if offset == 1 {
        let g = probe.graph();
        levels.push(Level {
            name: g.value(g.input()).name.clone(),
            width: probe.source_width(0),
            input: true,
        });
    }
    levels.extend(taps.iter().map(|t| Level {
        name: t.name.clone(),
        width: t.width,
        input: false,
    }));
    (levels, offset)
}

/// Builds `H_c` top-down from the class logit at the last tap.
pub fn build_neuron_circuit(probe: &Probe, class: usize, cfg: &RunConfig, scorer: &dyn Scorer) -> Result<NeuronCircuit> {
    cfg.validate()?;
    if probe.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (levels, offset) = levels_for(probe);
    let top = levels.len() - 1;
    let width = levels[top].width;
    if class >= width {
        return Err(Error::ChannelOutOfRange {
            value: levels[top].name.clone(),
            index: class,
            width,
        });
    }
    let mut nodes = Vec::new();
    let mut semantic_groups = Vec::new();
    let mut edges = Vec::new();
    let mut current: BTreeSet<usize> = BTreeSet::from([class]);
    for level in (0..=top).rev() {
        let mut children = BTreeSet::new();
        for &neuron in &current {
            if levels[level].input {
                nodes.push(Node {
                    level,
                    neuron,
                    concept: Vec::new(),
                    tau: None,
                    core: Vec::new(),
                    scores: Vec::new(),
                });
                continue;
            }
            let tap = level - offset;
            let concept = probe.concept(tap, neuron, cfg.k)?;
            let groups = split_semantic_groups(probe, tap, &concept, &cfg.grouping)?;
            let mut node = Node {
                level,
                neuron,
                concept: concept.members.clone(),
                tau: None,
                core: Vec::new(),
                scores: Vec::new(),
            };
            if level > 0 {
                let child = &levels[level - 1];
                let tau = cfg.tau_for(&child.name, child.width);
                let sel = select_core_neurons(probe, tap, neuron, tau, cfg.k, scorer)?;
                for g in &groups {
                    let scores = sel.table.scores_over(&g.patches);
                    for b in branch_weights(&sel.core.neurons, &scores) {
                        edges.push(Edge {
                            level,
                            parent: neuron,
                            child: b.child,
                            group: g.index,
                            weight: b.weight,
                            score: b.score,
                            degenerate: b.degenerate,
                        });
                    }
                }
                children.extend(sel.core.neurons.iter().copied());
                node.tau = Some(tau);
                node.core = sel.core.neurons;
                node.scores = sel.table.scores();
            }
            nodes.push(node);
            semantic_groups.extend(groups.into_iter().map(|group| LevelSemanticGroup { level, group }));
        }
        if level > 0 && children.is_empty() {
            return Err(Error::EmptyCoreSet(levels[level - 1].name.clone()));
        }
        current = children;
    }
    nodes.sort_by_key(|n| (n.level, n.neuron));
    Ok(NeuronCircuit {
        class,
        root: class,
        levels,
        nodes,
        semantic_groups,
        edges,
    })
}

/// Groups every level of `nc` and weights the group pairs joined by edges.
pub fn build_concept_circuit(nc: &NeuronCircuit, cfg: &GroupingConfig) -> Result<ConceptCircuit> {
    let mut groups: Vec<Group> = Vec::new();
    for level in 0..nc.levels.len() {
        let neurons = nc.neurons_at(level);
        let sgs = nc.semantic_groups_at(level);
        for g in form_neuron_groups(&neurons, &sgs, cfg)? {
            groups.push(Group {
                id: groups.len(),
                level,
                neurons: g.neurons,
                semantic_groups: g.semantic_groups,
                patches: g.patches,
                label: None,
            });
        }
    }
    let mut group_edges = Vec::new();
    for level in 1..nc.levels.len() {
        let edges: Vec<Edge> = nc.edges_at(level).into_iter().cloned().collect();
        for parent in groups.iter().filter(|g| g.level == level) {
            for child in groups.iter().filter(|g| g.level == level - 1) {
                let connected = edges
                    .iter()
                    .any(|e| parent.neurons.contains(&e.parent) && child.neurons.contains(&e.child));
                if connected {
                    group_edges.push(GroupEdge {
                        parent: parent.id,
                        child: child.id,
                        weight: group_edge_weight(&as_neuron_group(child), &as_neuron_group(parent), &edges),
                    });
                }
            }
        }
    }
    Ok(ConceptCircuit {
        class: nc.class,
        groups,
        group_edges,
    })
}

fn as_neuron_group(g: &Group) -> crate::grouping::NeuronGroup {
    crate::grouping::NeuronGroup {
        id: g.id,
        neurons: g.neurons.clone(),
        semantic_groups: g.semantic_groups.clone(),
        patches: g.patches.clone(),
    }
}

/// Hex SHA-256 of the model's ONNX encoding.
pub fn model_hash(graph: &ModelGraph) -> String {
    hex::encode(Sha256::digest(to_onnx_bytes(graph)))
}

/// Everything a circuit file holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitFile {
    pub version: String,
    pub model_hash: String,
    pub dataset_hash: String,
    pub config: RunConfig,
    pub class: usize,
    pub root: usize,
    pub levels: Vec<Level>,
    pub nodes: Vec<Node>,
    pub semantic_groups: Vec<LevelSemanticGroup>,
    pub edges: Vec<Edge>,
    pub groups: Vec<Group>,
    pub group_edges: Vec<GroupEdge>,
    #[serde(default)]
    pub checksum: String,
}

impl CircuitFile {
    pub fn new(model_hash: String, dataset_hash: String, config: RunConfig, nc: NeuronCircuit, cc: ConceptCircuit) -> Self {
        let mut file = Self {
            version: CIRCUIT_VERSION.into(),
            model_hash,
            dataset_hash,
            config,
            class: nc.class,
            root: nc.root,
            levels: nc.levels,
            nodes: nc.nodes,
            semantic_groups: nc.semantic_groups,
            edges: nc.edges,
            groups: cc.groups,
            group_edges: cc.group_edges,
            checksum: String::new(),
        };
        file.checksum = file.compute_checksum();
        file
    }

    pub fn neuron_circuit(&self) -> NeuronCircuit {
        NeuronCircuit {
            class: self.class,
            root: self.root,
            levels: self.levels.clone(),
            nodes: self.nodes.clone(),
            semantic_groups: self.semantic_groups.clone(),
            edges: self.edges.clone(),
        }
    }

    pub fn concept_circuit(&self) -> ConceptCircuit {
        ConceptCircuit {
            class: self.class,
            groups: self.groups.clone(),
            group_edges: self.group_edges.clone(),
        }
    }

    pub fn group(&self, id: usize) -> Result<&Group> {
        self.groups.iter().find(|g| g.id == id).ok_or(Error::UnknownGroup(id))
    }

    /// Recomputes the checksum, e.g. after attaching labels.
    pub fn reseal(&mut self) {
        self.checksum = self.compute_checksum();
    }

    pub fn compute_checksum(&self) -> String {
        let mut value = serde_json::to_value(self).expect("circuit serializes");
        body_checksum(&mut value)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("circuit serializes") + "\n"
    }

    /// Parses a circuit, checking the version before the checksum.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: serde_json::Value = serde_json::from_str(text)?;
        let version = value.get("version").and_then(|v| v.as_str()).unwrap_or("");
        if version != CIRCUIT_VERSION {
            return Err(Error::UnsupportedVersion(version.to_string()));
        }
        let expected = value.get("checksum").and_then(|v| v.as_str()).unwrap_or("").to_string();
        let actual = body_checksum(&mut value);
        if expected != actual {
            return Err(Error::Checksum { expected, actual });
        }
        let mut file: CircuitFile = serde_json::from_value(value)?;
        file.checksum = expected;
        Ok(file)
    }
}

fn body_checksum(value: &mut serde_json::Value) -> String {
    if let Some(obj) = value.as_object_mut() {
        obj.remove("checksum");
    }
    let bytes = serde_json::to_vec(value).expect("json value serializes");
    hex::encode(Sha256::digest(bytes))
}

pub fn save_circuit(file: &CircuitFile, path: &Path) -> Result<()> {
    std::fs::write(path, file.to_json())?;
    Ok(())
}

pub fn load_circuit(path: &Path) -> Result<CircuitFile> {
    CircuitFile::from_json(&std::fs::read_to_string(path)?)
}

/// Runs the whole pipeline for one class.
pub fn extract_circuit(
    probe: &Probe,
    class: usize,
    cfg: &RunConfig,
    scorer: &dyn Scorer,
    dataset_hash: String,
) -> Result<CircuitFile> {
    let nc = build_neuron_circuit(probe, class, cfg, scorer)?;
    let cc = build_concept_circuit(&nc, &cfg.grouping)?;
    Ok(CircuitFile::new(model_hash(probe.graph()), dataset_hash, cfg.clone(), nc, cc))
}
