mod common;

use common::*;
use neurflow::attribution::{
    branch_weights, importance_score, importance_table, rank_by_magnitude, select_core_neurons, CoreSet, IntegratedGradients,
};
use neurflow::concepts::Probe;
use neurflow::graph::{Conv, GraphBuilder, ModelGraph, Op};
use neurflow::model_io::{resolve_taps, TapConfig};
use neurflow::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

/// `y = Σ_i c_i x_i` per pixel, as a 1x1 convolution over `[3,4,4]`.
fn pointwise(c: [f32; 3]) -> ModelGraph {
    let mut b = GraphBuilder::new("x", vec![3, 4, 4]);
    let w = b.weight("w", vec![1, 3, 1, 1], c.to_vec());
    let op = Op::Conv(Conv {
        weight: w,
        bias: None,
        strides: [1, 1],
        pads: [0; 4],
        dilations: [1, 1],
    });
    b.node("mix", op, &["x"], "y").unwrap();
    b.finish("y").unwrap()
}

fn random_inputs(n: usize, seed: u64, same_channels: bool) -> Vec<(u64, Tensor)> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n as u64)
        .map(|id| {
            let plane: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
            let data: Vec<f64> = (0..3)
                .flat_map(|c| {
                    if same_channels {
                        plane.clone()
                    } else {
                        plane.iter().map(|v| v * (c + 1) as f64 + rng.gen_range(0.0..0.5)).collect()
                    }
                })
                .collect();
            (id, Tensor::new(vec![3, 4, 4], data).unwrap())
        })
        .collect()
}

#[test]
fn linear_block_score_is_closed_form() {
    let c = [0.5f32, -1.25, 2.0];
    let g = pointwise(c);
    let taps = resolve_taps(&g, &TapConfig::named(["y"])).unwrap();
    let inputs = random_inputs(6, 1, false);
    let probe = Probe::from_inputs(&g, &taps, inputs.clone()).unwrap();
    let ids: Vec<u64> = vec![0, 2, 5];
    let ig = IntegratedGradients::new(8);
    for (s, &cs) in c.iter().enumerate() {
        let want: f64 = ids
            .iter()
            .map(|&i| cs as f64 * inputs[i as usize].1.channel(s).iter().sum::<f64>())
            .sum();
        let got = importance_score(&probe, 0, 0, s, &ids, &ig).unwrap();
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "s={s}: {got} vs {want}");
    }
    assert_eq!(importance_score(&probe, 0, 0, 1, &[], &ig).unwrap(), 0.0);
}

#[test]
fn negated_channel_scores_negative() {
    let g = pointwise([-1.0, 0.0, 0.0]);
    let taps = resolve_taps(&g, &TapConfig::named(["y"])).unwrap();
    let probe = Probe::from_inputs(&g, &taps, random_inputs(4, 2, false)).unwrap();
    let t = importance_score(&probe, 0, 0, 0, probe.ids(), &IntegratedGradients::new(4)).unwrap();
    assert!(t < 0.0);
}

#[test]
fn bit_equal_magnitudes_rank_lower_id_first() {
    let g = pointwise([2.0, -2.0, 1.0]);
    let taps = resolve_taps(&g, &TapConfig::named(["y"])).unwrap();
    let probe = Probe::from_inputs(&g, &taps, random_inputs(5, 3, true)).unwrap();
    let sel = select_core_neurons(&probe, 0, 0, 2, 3, &IntegratedGradients::new(5)).unwrap();
    let scores = sel.table.scores();
    assert_eq!(scores[0].abs(), scores[1].abs());
    assert_eq!(sel.core.neurons, vec![0, 1]);
    assert_eq!(sel.core.scores, vec![scores[0], scores[1]]);
}

#[test]
fn tau_above_width_returns_every_source() {
    let g = toy_model();
    let taps = toy_taps(&g);
    let ds = toy_dataset(&g, 6);
    let probe = Probe::new(&g, &taps, &ds).unwrap();
    let sel = select_core_neurons(&probe, 1, 3, 100, 20, &IntegratedGradients::new(16)).unwrap();
    assert_eq!(sel.core.neurons.len(), 12);
    assert_eq!(sel.core.neurons, rank_by_magnitude(&sel.table.scores()));
    assert_eq!(sel.concept, probe.concept(1, 3, 20).unwrap());
}

#[test]
fn zero_tau_is_rejected() {
    let g = toy_model();
    let taps = toy_taps(&g);
    let ds = toy_dataset(&g, 6);
    let probe = Probe::new(&g, &taps, &ds).unwrap();
    assert!(select_core_neurons(&probe, 1, 3, 0, 20, &IntegratedGradients::new(4)).is_err());
}

#[test]
fn toy_scores_satisfy_completeness() {
    // Σ_s T(a, s, v) ≈ f(x) - f(0) on every patch of the concept.
    let g = toy_model();
    let taps = toy_taps(&g);
    let ds = toy_dataset(&g, 8);
    let probe = Probe::new(&g, &taps, &ds).unwrap();
    let concept = probe.concept(2, 4, 5).unwrap();
    let table = importance_table(&probe, 2, 4, &concept.patch_ids(), &IntegratedGradients::new(256)).unwrap();
    let block = probe.block(2).unwrap();
    let base = block.forward(&Tensor::zeros(block.input_shape())).unwrap();
    for (id, row) in table.patches.iter().zip(&table.rows) {
        let i = probe.index_of(*id).unwrap();
        let total: f64 = probe.tap_point(2, i).channel(4).iter().sum::<f64>() - base.channel(4).iter().sum::<f64>();
        let sum: f64 = row.iter().sum();
        assert!((sum - total).abs() <= 0.02 * total.abs().max(1e-6), "{sum} vs {total}");
    }
}

proptest! {
    #[test]
    fn branch_weights_are_normalized(scores in prop::collection::vec(-10.0f64..10.0, 1..16), tau in 1usize..8) {
        let core = CoreSet::from_scores(0, &scores, tau);
        let w = branch_weights(&core.neurons, &scores);
        if !w[0].degenerate {
            let total: f64 = w.iter().map(|b| b.weight.abs()).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            for b in &w {
                prop_assert_eq!(b.weight.signum(), b.score.signum());
            }
        }
    }

    #[test]
    fn positive_rescaling_keeps_selection_and_weights(scores in prop::collection::vec(-10.0f64..10.0, 1..16), tau in 1usize..8, c in 0.01f64..100.0) {
        let scaled: Vec<f64> = scores.iter().map(|s| s * c).collect();
        let a = CoreSet::from_scores(0, &scores, tau);
        let b = CoreSet::from_scores(0, &scaled, tau);
        // Distinct magnitudes can only swap if they collide after rounding.
        let mags: Vec<f64> = a.neurons.iter().map(|&n| scores[n].abs()).collect();
        if mags.windows(2).all(|m| m[0] > m[1] * (1.0 + 1e-12)) {
            prop_assert_eq!(&a.neurons, &b.neurons);
        }
        let wa = branch_weights(&a.neurons, &scores);
        let wb = branch_weights(&a.neurons, &scaled);
        for (x, y) in wa.iter().zip(&wb) {
            prop_assert!((x.weight - y.weight).abs() < 1e-12);
        }
    }
}
