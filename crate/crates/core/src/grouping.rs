//! Representative vectors, semantic groups within one neuron's concept, and
//! neuron groups across a tap.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::concepts::{Concept, Probe};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronGrouping {
    /// Neurons sharing a cluster are merged, transitively.
    #[default]
    ConnectedComponents,
    /// Only mutually co-clustered neurons are merged. Not implemented.
    MaximalClique,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupingConfig {
    /// Largest cluster count tried by the silhouette search.
    pub max_clusters: usize,
    pub neuron_grouping: NeuronGrouping,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            max_clusters: 10,
            neuron_grouping: NeuronGrouping::ConnectedComponents,
        }
    }
}

impl GroupingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_clusters < 2 {
            return Err(Error::Config("grouping.max_clusters must be at least 2".into()));
        }
        if self.neuron_grouping == NeuronGrouping::MaximalClique {
            return Err(Error::Config("maximal_clique neuron grouping is not implemented".into()));
        }
        Ok(())
    }
}

/// Per-channel spatial means of an activation (the raw units for `[F]`).
pub fn representative_vector(acts: &Tensor) -> Vec<f64> {
    crate::concepts::channel_activations(acts)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn distance_matrix(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = euclidean(&points[i], &points[j]);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Relabels so that labels appear in order 0, 1, 2, ... along the input.
pub fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

/// Average-linkage agglomerative clustering down to `n` clusters.
///
/// The closest pair of clusters merges first; among equal distances the pair
/// with the lowest member indices wins. Labels are canonical.
pub fn agglomerative(points: &[Vec<f64>], n: usize) -> Vec<usize> {
    let len = points.len();
    let n = n.clamp(1, len.max(1));
    let mut d = distance_matrix(points);
    // A cluster lives in the slot of its lowest member.
    let mut size = vec![1usize; len];
    let mut active: Vec<bool> = vec![true; len];
    let mut owner: Vec<usize> = (0..len).collect();
    let mut count = len;
    while count > n {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..len {
            if !active[i] {
                continue;
            }
            for j in i + 1..len {
                if active[j] && best.is_none_or(|(bd, _, _)| d[i][j] < bd) {
                    best = Some((d[i][j], i, j));
                }
            }
        }
        let (_, i, j) = best.expect("at least two active clusters");
        let (ni, nj) = (size[i] as f64, size[j] as f64);
        for k in 0..len {
            if active[k] && k != i && k != j {
                let v = (ni * d[i][k] + nj * d[j][k]) / (ni + nj);
                d[i][k] = v;
                d[k][i] = v;
            }
        }
        size[i] += size[j];
        active[j] = false;
        for o in owner.iter_mut() {
            if *o == j {
                *o = i;
            }
        }
        count -= 1;
    }
    canonical_labels(&owner)
}

/// Mean silhouette coefficient. A point alone in its cluster scores 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let len = points.len();
    if len == 0 {
        return 0.0;
    }
    let d = distance_matrix(points);
    let clusters = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut total = 0.0;
    for i in 0..len {
        let mut sums = vec![0.0; clusters];
        let mut counts = vec![0usize; clusters];
        for j in 0..len {
            if j != i {
                sums[labels[j]] += d[i][j];
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..clusters)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            continue;
        }
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / len as f64
}

/// Outcome of the silhouette search over cluster counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub labels: Vec<usize>,
    pub clusters: usize,
    /// `None` when the input was degenerate and no search ran.
    pub silhouette: Option<f64>,
}

fn zero_variance(points: &[Vec<f64>]) -> bool {
    points.iter().all(|p| p == &points[0])
}

/// Clusters `points` with the count in `[2, max_clusters]` that maximizes the
/// silhouette; ties keep the smaller count. Returns `None` for degenerate
/// input (fewer than three points or all points equal).
pub fn best_clustering(points: &[Vec<f64>], max_clusters: usize) -> Option<Clustering> {
    if points.len() < 3 || zero_variance(points) {
        return None;
    }
    let hi = max_clusters.min(points.len() - 1);
    let mut best: Option<Clustering> = None;
    for n in 2..=hi {
        let labels = agglomerative(points, n);
        let s = silhouette(points, &labels);
        if best.as_ref().is_none_or(|b| s > b.silhouette.unwrap_or(f64::NEG_INFINITY)) {
            best = Some(Clustering {
                clusters: labels.iter().max().map_or(0, |m| m + 1),
                labels,
                silhouette: Some(s),
            });
        }
    }
    best
}

/// `V_{s,j}` with its representative vector `r_{s,j}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticGroup {
    pub owner: usize,
    pub index: usize,
    /// Member patch ids in concept order.
    pub patches: Vec<u64>,
    pub representative: Vec<f64>,
}

fn mean_vector<'a>(vectors: impl Iterator<Item = &'a Vec<f64>>) -> Vec<f64> {
    let mut sum: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for v in vectors {
        if sum.is_empty() {
            sum = vec![0.0; v.len()];
        }
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
        n += 1;
    }
    if n > 0 {
        sum.iter_mut().for_each(|s| *s /= n as f64);
    }
    sum
}

/// Splits a concept given one representative vector per member (aligned
/// with `patches`). Degenerate concepts form a single group.
pub fn split_vectors(owner: usize, patches: &[u64], vectors: &[Vec<f64>], cfg: &GroupingConfig) -> Vec<SemanticGroup> {
    let labels = best_clustering(vectors, cfg.max_clusters).map_or_else(|| vec![0; patches.len()], |c| c.labels);
    let groups = labels.iter().max().map_or(0, |m| m + 1);
    (0..groups)
        .map(|j| {
            let members: Vec<usize> = (0..patches.len()).filter(|&i| labels[i] == j).collect();
            SemanticGroup {
                owner,
                index: j,
                patches: members.iter().map(|&i| patches[i]).collect(),
                representative: mean_vector(members.iter().map(|&i| &vectors[i])),
            }
        })
        .collect()
}

/// Semantic groups of a concept at `tap`, clustered on the source-layer
/// representative vectors of its patches.
pub fn split_semantic_groups(probe: &Probe, tap: usize, concept: &Concept, cfg: &GroupingConfig) -> Result<Vec<SemanticGroup>> {
    let ids = concept.patch_ids();
    let vectors = ids
        .iter()
        .map(|&id| Ok(probe.representative(tap, probe.index_of(id)?).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(split_vectors(concept.neuron, &ids, &vectors, cfg))
}

/// `G`: neurons at one tap whose concepts share semantic groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronGroup {
    pub id: usize,
    pub neurons: Vec<usize>,
    /// `(owner, index)` of every member semantic group.
    pub semantic_groups: Vec<(usize, usize)>,
    /// `V_G`, ascending patch ids.
    pub patches: Vec<u64>,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, x: usize) -> usize {
        let p = self.0[x];
        if p == x {
            return x;
        }
        let r = self.find(p);
        self.0[x] = r;
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        let (lo, hi) = (ra.min(rb), ra.max(rb));
        self.0[hi] = lo;
    }
}

/// Cluster labels for the semantic groups of one tap. Two vectors are too
/// few for the silhouette search, so they stay apart unless identical.
pub fn cluster_semantic_groups(groups: &[SemanticGroup], cfg: &GroupingConfig) -> Vec<usize> {
    let vectors: Vec<Vec<f64>> = groups.iter().map(|g| g.representative.clone()).collect();
    match best_clustering(&vectors, cfg.max_clusters) {
        Some(c) => c.labels,
        None if !vectors.is_empty() && zero_variance(&vectors) => vec![0; vectors.len()],
        None => (0..vectors.len()).collect(),
    }
}

/// Neuron groups for one tap. `groups` holds the semantic groups of every
/// node at the tap; nodes are merged when any of their semantic groups share
/// a cluster, closed under transitivity. Group ids follow the lowest neuron.
pub fn form_neuron_groups(neurons: &[usize], groups: &[SemanticGroup], cfg: &GroupingConfig) -> Result<Vec<NeuronGroup>> {
    if cfg.neuron_grouping == NeuronGrouping::MaximalClique {
        return Err(Error::Config("maximal_clique neuron grouping is not implemented".into()));
    }
    let nodes: Vec<usize> = neurons.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let slot = |n: usize| nodes.binary_search(&n).ok();
    if let Some(g) = groups.iter().find(|g| slot(g.owner).is_none()) {
        return Err(Error::Config(format!("semantic group owner {} is not a node of the tap", g.owner)));
    }
    let labels = cluster_semantic_groups(groups, cfg);
    let mut uf = UnionFind((0..nodes.len()).collect());
    let clusters = labels.iter().max().map_or(0, |m| m + 1);
    for c in 0..clusters {
        let owners: Vec<usize> = groups
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == c)
            .filter_map(|(g, _)| slot(g.owner))
            .collect();
        for w in owners.windows(2) {
            uf.union(w[0], w[1]);
        }
    }
    let mut roots: Vec<usize> = Vec::new();
    let mut out: Vec<NeuronGroup> = Vec::new();
    for (i, &n) in nodes.iter().enumerate() {
        let r = uf.find(i);
        let gi = match roots.iter().position(|&x| x == r) {
            Some(p) => p,
            None => {
                roots.push(r);
                out.push(NeuronGroup {
                    id: out.len(),
                    neurons: Vec::new(),
                    semantic_groups: Vec::new(),
                    patches: Vec::new(),
                });
                out.len() - 1
            }
        };
        out[gi].neurons.push(n);
    }
    for g in out.iter_mut() {
        let mut patches = BTreeSet::new();
        for sg in groups.iter().filter(|sg| g.neurons.contains(&sg.owner)) {
            g.semantic_groups.push((sg.owner, sg.index));
            patches.extend(sg.patches.iter().copied());
        }
        g.patches = patches.into_iter().collect();
    }
    Ok(out)
}

/// One branch of the neuron circuit, reduced to what group weights need.
pub trait WeightedEdge {
    fn parent(&self) -> usize;
    fn child(&self) -> usize;
    fn weight(&self) -> f64;
}

/// `W(G_i, G_j)`: sum of the branch weights from parents in `parent` to
/// children in `child`, over every parent semantic group.
pub fn group_edge_weight<E: WeightedEdge>(child: &NeuronGroup, parent: &NeuronGroup, edges: &[E]) -> f64 {
    edges
        .iter()
        .filter(|e| parent.neurons.contains(&e.parent()) && child.neurons.contains(&e.child()))
        .map(|e| e.weight())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_labels_follow_first_appearance() {
        assert_eq!(canonical_labels(&[4, 4, 1, 7, 1]), vec![0, 0, 1, 2, 1]);
    }

    #[test]
    fn average_linkage_on_a_line() {
        // Points 0, 1, 5, 6, 20: the two pairs merge first, then the pairs.
        let pts: Vec<Vec<f64>> = [0.0, 1.0, 5.0, 6.0, 20.0].iter().map(|&x| vec![x]).collect();
        assert_eq!(agglomerative(&pts, 3), vec![0, 0, 1, 1, 2]);
        assert_eq!(agglomerative(&pts, 2), vec![0, 0, 0, 0, 1]);
        assert_eq!(agglomerative(&pts, 1), vec![0; 5]);
    }

    #[test]
    fn equal_distances_merge_lowest_pair_first() {
        let pts: Vec<Vec<f64>> = [0.0, 1.0, 2.0].iter().map(|&x| vec![x]).collect();
        assert_eq!(agglomerative(&pts, 2), vec![0, 0, 1]);
    }

    #[test]
    fn silhouette_hand_values() {
        // Clusters {0,1} and {5}: point 0 has a=1, b=5; point 1 has a=1, b=4.
        let pts: Vec<Vec<f64>> = [0.0, 1.0, 5.0].iter().map(|&x| vec![x]).collect();
        let s = silhouette(&pts, &[0, 0, 1]);
        let want = ((5.0 - 1.0) / 5.0 + (4.0 - 1.0) / 4.0 + 0.0) / 3.0;
        assert!((s - want).abs() < 1e-15);
    }

    #[test]
    fn degenerate_inputs_form_one_group() {
        let same = vec![vec![1.0, 2.0]; 6];
        let g = split_vectors(3, &[1, 2, 3, 4, 5, 6], &same, &GroupingConfig::default());
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].patches.len(), 6);
        let two = vec![vec![0.0], vec![9.0]];
        assert_eq!(split_vectors(0, &[1, 2], &two, &GroupingConfig::default()).len(), 1);
    }

    #[test]
    fn clique_grouping_is_a_config_error() {
        let cfg = GroupingConfig {
            neuron_grouping: NeuronGrouping::MaximalClique,
            ..GroupingConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(form_neuron_groups(&[0], &[], &cfg).is_err());
    }
}
