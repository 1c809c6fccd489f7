mod common;

use common::*;
use neurflow::concepts::Probe;
use neurflow::grouping::{
    agglomerative, best_clustering, form_neuron_groups, group_edge_weight, representative_vector, split_semantic_groups,
    split_vectors, GroupingConfig, NeuronGroup, SemanticGroup, WeightedEdge,
};
use neurflow::Tensor;
use proptest::prelude::*;

/// Average linkage recomputing every cluster distance from scratch.
fn oracle_agglomerative(points: &[Vec<f64>], n: usize) -> Vec<Vec<usize>> {
    let mut clusters: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
    while clusters.len() > n {
        let avg = |a: &Vec<usize>, b: &Vec<usize>| {
            let s: f64 = a.iter().flat_map(|&i| b.iter().map(move |&j| (i, j))).map(|(i, j)| dist(&points[i], &points[j])).sum();
            s / (a.len() * b.len()) as f64
        };
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let d = avg(&clusters[i], &clusters[j]);
                if d < best.0 {
                    best = (d, i, j);
                }
            }
        }
        let moved = clusters.remove(best.2);
        clusters[best.1].extend(moved);
        clusters[best.1].sort();
    }
    clusters.sort();
    clusters
}

fn partition(labels: &[usize]) -> Vec<Vec<usize>> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut out: Vec<Vec<usize>> = (0..k).map(|c| (0..labels.len()).filter(|&i| labels[i] == c).collect()).collect();
    out.sort();
    out
}

fn blobs() -> Vec<Vec<f64>> {
    let mut pts = Vec::new();
    for i in 0..6 {
        let e = i as f64 * 0.01;
        pts.push(vec![e, -e, 0.5 * e]);
        pts.push(vec![10.0 + e, 10.0 - e, 10.0]);
    }
    pts
}

#[test]
fn two_blobs_split_into_two_groups() {
    let pts = blobs();
    let ids: Vec<u64> = (100..112).collect();
    let groups = split_vectors(7, &ids, &pts, &GroupingConfig::default());
    assert_eq!(groups.len(), 2);
    assert_eq!(groups[0].patches, vec![100, 102, 104, 106, 108, 110]);
    assert_eq!(groups[1].patches, vec![101, 103, 105, 107, 109, 111]);
    assert!(groups.iter().all(|g| g.owner == 7));
    assert!((groups[1].representative[2] - 10.0).abs() < 1e-12);
}

#[test]
fn chosen_count_maximizes_oracle_silhouette() {
    let mut rng_pts = Vec::new();
    let centres = [[0.0, 0.0], [4.0, 0.0], [0.0, 5.0], [6.0, 6.0]];
    for i in 0..24 {
        let c = centres[i % 4];
        let j = (i as f64 * 0.7).sin();
        rng_pts.push(vec![c[0] + j, c[1] + (i as f64 * 1.3).cos()]);
    }
    let cfg = GroupingConfig::default();
    let got = best_clustering(&rng_pts, cfg.max_clusters).unwrap();
    let scores: Vec<(usize, f64)> = (2..=10).map(|n| (n, oracle_silhouette(&rng_pts, &agglomerative(&rng_pts, n)))).collect();
    let best = scores.iter().fold(scores[0], |b, s| if s.1 > b.1 { *s } else { b });
    assert_eq!(got.clusters, best.0);
    assert!((got.silhouette.unwrap() - best.1).abs() < 1e-12);
}

#[test]
fn identical_vectors_form_one_group() {
    let pts = vec![vec![0.25, 1.0]; 9];
    let ids: Vec<u64> = (0..9).collect();
    let g = split_vectors(0, &ids, &pts, &GroupingConfig::default());
    assert_eq!(g.len(), 1);
    assert_eq!(g[0].patches, ids);
}

#[test]
fn representative_of_constant_channels() {
    let mut t = Tensor::zeros(&[3, 4, 4]);
    for (c, v) in [1.5, -2.0, 0.0].into_iter().enumerate() {
        t.channel_mut(c).fill(v);
    }
    assert_eq!(representative_vector(&t), vec![1.5, -2.0, 0.0]);
}

#[test]
fn toy_representatives_match_reference_means() {
    let g = toy_model();
    let taps = toy_taps(&g);
    let ds = toy_dataset(&g, 1);
    let probe = Probe::new(&g, &taps, &ds).unwrap();
    for i in [0, 200, 589.min(probe.len() - 1)] {
        let want = means(&reference_eval(&g, &ds.patches[i].pixels)["relu2"], 16);
        let got = probe.representative(2, i);
        assert_eq!(got.len(), 16);
        assert!(max_rel_err(got, &want) < 1e-9);
    }
}

#[test]
fn toy_semantic_groups_partition_the_concept() {
    let g = toy_model();
    let taps = toy_taps(&g);
    let ds = toy_dataset(&g, 9);
    let probe = Probe::new(&g, &taps, &ds).unwrap();
    let concept = probe.concept(2, 0, 50).unwrap();
    let groups = split_semantic_groups(&probe, 2, &concept, &GroupingConfig::default()).unwrap();
    assert!(!groups.is_empty() && groups.len() <= 10);
    let mut all: Vec<u64> = groups.iter().flat_map(|g| g.patches.clone()).collect();
    all.sort();
    let mut want = concept.patch_ids();
    want.sort();
    assert_eq!(all, want);
    // Groups are ordered by the best-ranked patch they contain.
    let first: Vec<usize> = groups
        .iter()
        .map(|g| concept.patch_ids().iter().position(|p| *p == g.patches[0]).unwrap())
        .collect();
    assert!(first.windows(2).all(|w| w[0] < w[1]));
}

fn sg(owner: usize, index: usize, v: [f64; 2]) -> SemanticGroup {
    SemanticGroup {
        owner,
        index,
        patches: vec![(owner * 10 + index) as u64],
        representative: v.to_vec(),
    }
}

#[test]
fn planted_groups_follow_union_find() {
    // Neurons 2, 5, 9. Clusters {2.0, 5.0}, {9.0}, {9.1}, {2.1}: 2 and 5
    // share a cluster, 9 shares none.
    let groups = vec![
        sg(2, 0, [0.0, 0.0]),
        sg(2, 1, [0.0, 100.0]),
        sg(5, 0, [0.3, 0.0]),
        sg(9, 0, [50.0, 50.0]),
        sg(9, 1, [100.0, 0.0]),
    ];
    let out = form_neuron_groups(&[9, 2, 5], &groups, &GroupingConfig::default()).unwrap();
    let sets: Vec<Vec<usize>> = out.iter().map(|g| g.neurons.clone()).collect();
    assert_eq!(sets, vec![vec![2, 5], vec![9]]);
    assert_eq!(out[0].semantic_groups, vec![(2, 0), (2, 1), (5, 0)]);
    assert_eq!(out[0].patches, vec![20, 21, 50]);
    assert_eq!(out[1].patches, vec![90, 91]);
}

#[test]
fn co_clustering_is_transitive() {
    // 2 and 5 share one cluster, 5 and 9 another.
    let groups = vec![
        sg(2, 0, [0.0, 0.0]),
        sg(5, 0, [0.3, 0.0]),
        sg(5, 1, [50.0, 50.0]),
        sg(9, 0, [50.2, 50.0]),
        sg(9, 1, [100.0, 0.0]),
    ];
    let out = form_neuron_groups(&[2, 5, 9], &groups, &GroupingConfig::default()).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].neurons, vec![2, 5, 9]);
}

#[test]
fn groups_that_only_cluster_within_a_neuron_stay_apart() {
    // Every cluster holds semantic groups of a single neuron.
    let groups = vec![
        sg(0, 0, [0.0, 0.0]),
        sg(0, 1, [0.2, 0.0]),
        sg(1, 0, [30.0, 0.0]),
        sg(1, 1, [30.0, 0.2]),
        sg(2, 0, [0.0, 30.0]),
    ];
    let out = form_neuron_groups(&[0, 1, 2], &groups, &GroupingConfig::default()).unwrap();
    let sets: Vec<Vec<usize>> = out.iter().map(|g| g.neurons.clone()).collect();
    assert_eq!(sets, vec![vec![0], vec![1], vec![2]]);
    // Two vectors are too few to cluster, so distinct ones stay apart.
    let two = form_neuron_groups(&[0, 1], &[groups[0].clone(), groups[2].clone()], &GroupingConfig::default()).unwrap();
    assert_eq!(two.len(), 2);
}

struct E(usize, usize, f64);

impl WeightedEdge for E {
    fn parent(&self) -> usize {
        self.0
    }
    fn child(&self) -> usize {
        self.1
    }
    fn weight(&self) -> f64 {
        self.2
    }
}

fn ng(neurons: &[usize]) -> NeuronGroup {
    NeuronGroup {
        id: 0,
        neurons: neurons.to_vec(),
        semantic_groups: vec![],
        patches: vec![],
    }
}

#[test]
fn group_weight_sums_member_edges() {
    let parent = ng(&[1, 4]);
    let child = ng(&[0, 3]);
    let edges = [E(1, 0, 0.75), E(4, 3, -0.25), E(1, 3, 0.5), E(2, 0, 9.0), E(1, 7, 9.0)];
    assert_eq!(group_edge_weight(&child, &parent, &edges), 1.0);
    assert_eq!(group_edge_weight(&child, &parent, &edges[..1]), 0.75);
    assert_eq!(group_edge_weight(&ng(&[5]), &parent, &edges), 0.0);
}

proptest! {
    #[test]
    fn linkage_matches_oracle(raw in prop::collection::vec((0u8..20, 0u8..20), 3..14), n in 1usize..6) {
        // Integer coordinates scaled by an irrational step keep distances distinct.
        let pts: Vec<Vec<f64>> = raw.iter().enumerate().map(|(i, (x, y))| vec![*x as f64 + i as f64 * 1e-3, *y as f64 * std::f64::consts::SQRT_2]).collect();
        let n = n.min(pts.len());
        prop_assert_eq!(partition(&agglomerative(&pts, n)), oracle_agglomerative(&pts, n));
    }

    #[test]
    fn neuron_groups_partition_the_tap(vs in prop::collection::vec((0usize..6, -5.0f64..5.0, -5.0f64..5.0), 1..14)) {
        let mut next = [0usize; 6];
        let groups: Vec<SemanticGroup> = vs.iter().map(|(o, x, y)| {
            next[*o] += 1;
            sg(*o, next[*o] - 1, [*x, *y])
        }).collect();
        let neurons: Vec<usize> = (0..6).collect();
        let out = form_neuron_groups(&neurons, &groups, &GroupingConfig::default()).unwrap();
        let mut seen: Vec<usize> = out.iter().flat_map(|g| g.neurons.clone()).collect();
        seen.sort();
        prop_assert_eq!(&seen, &neurons);
        let again = form_neuron_groups(&neurons, &groups, &GroupingConfig::default()).unwrap();
        prop_assert_eq!(out, again);
    }
}
