mod common;

use std::collections::BTreeSet;

use common::*;
use neurflow::concepts::{concept_loss, top_k, Concept, Probe};
use neurflow::engine::KnockoutMask;
use proptest::prelude::*;

#[test]
fn concept_matches_brute_force_scan() {
    let g = toy_model();
    let taps = toy_taps(&g);
    let ds = toy_dataset(&g, 2);
    let probe = Probe::new(&g, &taps, &ds).unwrap();
    let relu2: Vec<Vec<f64>> = ds
        .patches
        .iter()
        .map(|p| means(&reference_eval(&g, &p.pixels)["relu2"], 16))
        .collect();
    for neuron in [0, 5, 11] {
        let mut scored: Vec<(u64, f64)> = ds.patches.iter().zip(&relu2).map(|(p, m)| (p.id, m[neuron])).collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let concept = probe.concept(1, neuron, 5).unwrap();
        assert_eq!(concept.patch_ids(), scored.iter().take(5).map(|s| s.0).collect::<Vec<_>>());
        for (m, (_, want)) in concept.members.iter().zip(&scored) {
            assert!((m.activation - want).abs() < 1e-9);
        }
    }
}

#[test]
fn knockout_activations_match_full_masked_forward() {
    let g = toy_model();
    let taps = toy_taps(&g);
    let ds = toy_dataset(&g, 4);
    let probe = Probe::new(&g, &taps, &ds).unwrap();
    let s: BTreeSet<usize> = [1, 4, 9].into();
    let got = probe.knockout_activations(2, &s, &[0, 7]).unwrap();
    let block = probe.block(2).unwrap();
    let mask = [KnockoutMask::new(block.from(), s.iter().copied())];
    for i in (0..probe.len()).step_by(37) {
        let full = block.forward_masked(probe.source_point(2, i), &mask).unwrap();
        let m = full.channel_means();
        assert!((got[0][i] - m[0]).abs() < 1e-12);
        assert!((got[1][i] - m[7]).abs() < 1e-12);
    }
}

#[test]
fn empty_knockout_keeps_the_concept() {
    let g = toy_model();
    let taps = toy_taps(&g);
    let ds = toy_dataset(&g, 0);
    let probe = Probe::new(&g, &taps, &ds).unwrap();
    assert_eq!(probe.concept_loss(2, 3, &BTreeSet::new(), 50).unwrap(), 1.0);
    let all: BTreeSet<usize> = (0..16).collect();
    let knocked = probe.knockout_concept(2, 3, &all, 50).unwrap();
    // With every source zeroed all patches tie, so the lowest ids win.
    assert_eq!(knocked.patch_ids(), probe.ids()[..50].to_vec());
}

#[test]
fn probe_rejects_unsorted_or_empty_input() {
    let g = toy_model();
    let taps = toy_taps(&g);
    let x = neurflow::Tensor::zeros(&[3, 32, 32]);
    assert!(Probe::from_inputs(&g, &taps, vec![]).is_err());
    assert!(Probe::from_inputs(&g, &taps, vec![(2, x.clone()), (1, x)]).is_err());
}

#[test]
fn logit_concept_ranks_patches_by_class_score() {
    let g = toy_model();
    let taps = toy_taps(&g);
    let ds = toy_dataset(&g, 5);
    let probe = Probe::new(&g, &taps, &ds).unwrap();
    let c = probe.concept(3, 5, 10).unwrap();
    let top = &ds.get(c.members[0].patch).unwrap().pixels;
    let logits = &reference_eval(&g, top)["logits"];
    assert!((logits[5] - c.members[0].activation).abs() < 1e-9);
}

fn concept(ids: &[u64]) -> Concept {
    Concept {
        neuron: 0,
        k: ids.len(),
        members: top_k(ids.iter().enumerate().map(|(i, &id)| (id, -(i as f64))), ids.len()),
    }
}

proptest! {
    #[test]
    fn top_k_is_a_sorted_prefix(acts in prop::collection::vec(-5i32..5, 1..60), k in 1usize..20) {
        let items: Vec<(u64, f64)> = acts.iter().enumerate().map(|(i, &a)| (i as u64, a as f64)).collect();
        let small = top_k(items.clone(), k);
        let big = top_k(items.clone(), k + 1);
        prop_assert_eq!(small.len(), k.min(items.len()));
        prop_assert_eq!(&big[..small.len()], &small[..]);
        prop_assert!(small.windows(2).all(|w| w[0].activation > w[1].activation
            || (w[0].activation == w[1].activation && w[0].patch < w[1].patch)));
    }

    #[test]
    fn loss_is_a_fraction(a in prop::collection::btree_set(0u64..40, 1..20), b in prop::collection::btree_set(0u64..40, 1..20)) {
        let a: Vec<u64> = a.into_iter().collect();
        let b: Vec<u64> = b.into_iter().collect();
        let l = concept_loss(&concept(&a), &concept(&b));
        prop_assert!((0.0..=1.0).contains(&l));
        prop_assert_eq!(concept_loss(&concept(&a), &concept(&a)), 1.0);
    }
}
