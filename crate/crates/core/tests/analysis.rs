mod common;

use std::collections::BTreeMap;

use common::*;
use neurflow::analysis::stats::pearson;
use neurflow::analysis::{
    combinations, confidence, debug_image, k_sensitivity_experiment, logit_drop_ranking, optimality_experiment,
    recall_under_masks, representative_neurons, ConfidenceModel, KSensitivityConfig, OptimalityConfig, Workbench,
    EPSILON,
};
use neurflow::circuit::{load_circuit, CircuitFile, Group, Level, LevelSemanticGroup};
use neurflow::concepts::Probe;
use neurflow::config::RunConfig;
use neurflow::engine::{Block, KnockoutMask};
use neurflow::graph::{Gemm, GraphBuilder, Op};
use neurflow::grouping::SemanticGroup;
use neurflow::patching::{crop_rects, load_model_inputs, PatchConfig};
use neurflow::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn golden() -> CircuitFile {
    load_circuit(&fixtures().join("golden/toy_class0.circuit.json")).unwrap()
}

fn heldout_sample(g: &neurflow::graph::ModelGraph, n: usize) -> Vec<(u64, Tensor)> {
    load_model_inputs(g, &heldout_dir())
        .unwrap()
        .into_iter()
        .step_by(500 / n)
        .take(n)
        .enumerate()
        .map(|(i, (_, x))| (i as u64, x))
        .collect()
}

#[test]
fn metric_trivial_values_are_exact() {
    let maxima = [3.0, 0.5, 8.0, 1.0];
    assert_eq!(confidence(&maxima, &maxima, &[0, 1, 2, 3]).0, 1.0);
    assert_eq!(confidence(&[1.5, 0.25, 0.0, 0.0], &maxima, &[0, 1]).0, 0.5);
    let zeroed = confidence(&[3.0, 0.0, 8.0, 1.0], &maxima, &[0, 1, 2, 3]).0;
    assert!(zeroed <= 1e-2, "{zeroed}");
    // exp(mean(0, 0, 0, ln(ε / 0.5))) = (2ε)^(1/4)
    assert!((zeroed - (2.0 * EPSILON).powf(0.25)).abs() < 1e-15);
}

proptest! {
    #[test]
    fn metric_stays_in_unit_interval(
        phi in prop::collection::vec(-5.0f64..5.0, 6),
        maxima in prop::collection::vec(-1.0f64..5.0, 6),
        n in 1usize..6,
    ) {
        let neurons: Vec<usize> = (0..n).collect();
        let (v, excluded) = confidence(&phi, &maxima, &neurons);
        prop_assert!((0.0..=1.0).contains(&v));
        let want: Vec<usize> = neurons.iter().copied().filter(|&s| maxima[s] <= 0.0).collect();
        prop_assert_eq!(excluded, want);
    }

    #[test]
    fn pearson_matches_a_two_pass_oracle(seed in any::<u64>(), n in 2usize..80) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.3 * x + rng.gen_range(-5.0..5.0)).collect();
        let mx = xs.iter().sum::<f64>() / n as f64;
        let my = ys.iter().sum::<f64>() / n as f64;
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        let want = cov / (vx * vy).sqrt();
        prop_assert!((pearson(&xs, &ys).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn constant_series_have_no_correlation() {
    assert_eq!(pearson(&[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5]), None);
    assert_eq!(pearson(&[1.0], &[2.0]), None);
}

fn sg(level: usize, owner: usize, index: usize, rep: [f64; 2]) -> LevelSemanticGroup {
    LevelSemanticGroup {
        level,
        group: SemanticGroup {
            owner,
            index,
            patches: vec![],
            representative: rep.to_vec(),
        },
    }
}

#[test]
fn representatives_are_nearest_to_the_centroid() {
    let mut c = golden();
    // Centroid of the six vectors is (1, 0). Neuron 6 has no semantic group.
    c.semantic_groups = vec![
        sg(0, 1, 0, [5.0, 0.0]),
        sg(0, 2, 0, [1.0, 1.0]),
        sg(0, 3, 0, [1.0, -1.0]),
        sg(0, 4, 0, [-3.0, 0.0]),
        sg(0, 4, 1, [1.0, 0.5]),
        sg(0, 5, 0, [1.0, 0.0]),
    ];
    let group = Group {
        id: 0,
        level: 0,
        neurons: vec![1, 2, 3, 4, 5, 6],
        semantic_groups: vec![(1, 0), (2, 0), (3, 0), (4, 0), (4, 1), (5, 0)],
        patches: vec![],
        label: None,
    };
    // Distances: 5 → 0, 4 → 0.5 (its nearer group), 2 and 3 → 1 (tie by id), 1 → 4.
    assert_eq!(representative_neurons(&c, &group, 5), vec![5, 4, 2, 3, 1]);
    assert_eq!(representative_neurons(&c, &group, 7), vec![5, 4, 2, 3, 1, 6]);
}

/// Logit of `class` with `channels` of relu3 zeroed, evaluated with the
/// direct-loop reference and a hand-written head.
fn reference_masked_logit(g: &neurflow::graph::ModelGraph, x: &Tensor, channels: &[usize], class: usize) -> f64 {
    let vals = reference_eval(g, x);
    let relu3 = &vals["relu3"];
    let width = 24;
    let plane = relu3.len() / width;
    let w = g.weights().iter().find(|w| w.name == "fc.weight").unwrap();
    let b = g.weights().iter().find(|w| w.name == "fc.bias").unwrap();
    let mut logit = b.data[class] as f64;
    for c in 0..width {
        if channels.contains(&c) {
            continue;
        }
        let m = relu3[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64;
        logit += w.data[class * width + c] as f64 * m;
    }
    logit
}

#[test]
fn logit_drop_matches_per_image_recomputation() {
    let g = toy_model();
    let c = golden();
    let level = c.levels.iter().position(|l| l.name == "relu3").unwrap();
    let group = c.groups.iter().find(|gr| gr.level == level).unwrap();
    let images = heldout_sample(&g, 20);
    let ranked = logit_drop_ranking(&g, &c, group.id, &images, 0, images.len()).unwrap();
    assert_eq!(ranked.len(), images.len());
    let mut want: Vec<(u64, f64)> = images
        .iter()
        .map(|(id, x)| {
            let unmasked = reference_masked_logit(&g, x, &[], 0);
            (*id, unmasked - reference_masked_logit(&g, x, &group.neurons, 0))
        })
        .collect();
    want.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for (got, (id, delta)) in ranked.iter().zip(&want) {
        assert_eq!(got.image, *id);
        assert!((got.delta - delta).abs() < 1e-9, "{} vs {delta}", got.delta);
    }
    let top = logit_drop_ranking(&g, &c, group.id, &images, 0, 3).unwrap();
    assert_eq!(top, ranked[..3]);
}

#[test]
fn empty_group_gives_zero_drops_in_id_order() {
    let g = toy_model();
    let mut c = golden();
    c.groups[0].neurons.clear();
    let mut images = heldout_sample(&g, 5);
    images.reverse();
    let ranked = logit_drop_ranking(&g, &c, c.groups[0].id, &images, 3, 10).unwrap();
    assert!(ranked.iter().all(|r| r.delta == 0.0));
    assert_eq!(ranked.iter().map(|r| r.image).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
}

#[test]
fn masking_the_whole_tap_on_a_bias_free_head_zeroes_the_logit() {
    let mut b = GraphBuilder::new("x", vec![4]);
    b.node("act", Op::Relu, &["x"], "h").unwrap();
    let w = b.weight("fc", vec![2, 4], vec![1.0, -2.0, 0.5, 3.0, -1.0, 1.0, 1.0, 0.25]);
    b.node("fc", Op::Gemm(Gemm { weight: w, bias: None }), &["h"], "y").unwrap();
    let g = b.finish("y").unwrap();
    let mut c = golden();
    c.levels = vec![Level { name: "h".into(), width: 4, input: false }];
    c.groups = vec![Group {
        id: 7,
        level: 0,
        neurons: vec![0, 1, 2, 3],
        semantic_groups: vec![],
        patches: vec![],
        label: None,
    }];
    let x = Tensor::new(vec![4], vec![1.0, 2.0, 0.5, 4.0]).unwrap();
    let r = logit_drop_ranking(&g, &c, 7, &[(0, x)], 1, 1).unwrap();
    assert_eq!(r[0].masked, 0.0);
    assert_eq!(r[0].delta, r[0].unmasked);
    assert_eq!(r[0].unmasked, -1.0 + 2.0 + 0.5 + 1.0);
    assert!(logit_drop_ranking(&g, &c, 8, &[], 1, 1).is_err());
}

fn toy_probe_setup() -> (neurflow::graph::ModelGraph, neurflow::model_io::TapSpec, neurflow::patching::PatchDataset) {
    let g = toy_model();
    let taps = toy_taps(&g);
    let ds = toy_dataset(&g, 0);
    (g, taps, ds)
}

#[test]
fn debug_report_covers_every_crop_and_group() {
    let (g, taps, ds) = toy_probe_setup();
    let probe = Probe::new(&g, &taps, &ds).unwrap();
    let c = golden();
    let model = ConfidenceModel::new(&c, &probe).unwrap();
    let image = load_model_inputs(&g, &probe_dir()).unwrap().remove(0).1;
    let cfg = PatchConfig::default();
    let report = debug_image(&model, &image, "relu2", &BTreeMap::new(), &cfg).unwrap();
    assert_eq!(report.crops.len(), crop_rects(32, 32, &cfg).len());
    let level = c.levels.iter().position(|l| l.name == "relu2").unwrap();
    let groups: Vec<usize> = c.groups.iter().filter(|gr| gr.level == level).map(|gr| gr.id).collect();
    assert_eq!(report.groups, groups);
    assert!(report.crops.iter().all(|cr| cr.flagged.is_empty() && cr.scores.len() == groups.len()));
    assert!(neurflow::analysis::contact_sheet(&image, &report).is_none());

    let all: BTreeMap<usize, f64> = groups.iter().map(|&id| (id, -1.0)).collect();
    let flagged = debug_image(&model, &image, "relu2", &all, &cfg).unwrap();
    assert!(flagged.crops.iter().all(|cr| cr.flagged == groups));
    let sheet = neurflow::analysis::contact_sheet(&image, &flagged).unwrap();
    assert!(sheet.width() > 32);
    assert!(debug_image(&model, &image, "nope", &all, &cfg).is_err());
}

#[test]
fn exemplar_patch_scores_in_the_top_decile() {
    let (g, taps, ds) = toy_probe_setup();
    let probe = Probe::new(&g, &taps, &ds).unwrap();
    let c = golden();
    let model = ConfidenceModel::new(&c, &probe).unwrap();
    for group in c.groups.iter().filter(|gr| !c.levels[gr.level].input) {
        let lead = model.representatives(group.id).unwrap()[0];
        let top = c.nodes.iter().find(|n| n.level == group.level && n.neuron == lead).unwrap().concept[0].patch;
        assert!(group.patches.contains(&top));
        let exemplar = &ds.get(top).unwrap().pixels;
        let report = debug_image(&model, exemplar, &c.levels[group.level].name, &BTreeMap::new(), &PatchConfig::default())
            .unwrap();
        let full = report.crops.iter().find(|cr| cr.scale == 1.0).unwrap();
        let score = full.scores.iter().find(|s| s.group == group.id).unwrap().value;
        let dataset = model.dataset_scores(&probe, group.id).unwrap();
        let above = dataset.iter().filter(|v| **v > score).count();
        assert!(above * 10 <= dataset.len(), "group {}: {above} of {} score higher", group.id, dataset.len());
    }
}

#[test]
fn blank_image_scores_near_the_floor_on_a_bias_free_model() {
    let mut b = GraphBuilder::new("x", vec![3, 8, 8]);
    b.node("act", Op::Relu, &["x"], "h").unwrap();
    let g = b.finish("h").unwrap();
    let taps = neurflow::model_io::resolve_taps(&g, &neurflow::model_io::TapConfig::named(["h"])).unwrap();
    let inputs: Vec<(u64, Tensor)> = (1..4u64).map(|i| (i, Tensor::filled(&[3, 8, 8], i as f64 / 4.0))).collect();
    let probe = Probe::from_inputs(&g, &taps, inputs).unwrap();
    let mut c = golden();
    c.levels = vec![
        Level { name: "x".into(), width: 3, input: true },
        Level { name: "h".into(), width: 3, input: false },
    ];
    c.semantic_groups.clear();
    c.groups = vec![Group {
        id: 0,
        level: 1,
        neurons: vec![0, 1, 2],
        semantic_groups: vec![],
        patches: vec![],
        label: None,
    }];
    let model = ConfidenceModel::new(&c, &probe).unwrap();
    let cfg = PatchConfig {
        min_window: 1,
        ..PatchConfig::default()
    };
    let report = debug_image(&model, &Tensor::zeros(&[3, 8, 8]), "h", &BTreeMap::new(), &cfg).unwrap();
    for crop in &report.crops {
        assert!(crop.scores[0].value <= EPSILON / 0.75 * (1.0 + 1e-9));
    }
}

fn small_workbench(g: &neurflow::graph::ModelGraph) -> Workbench<'_> {
    let taps = toy_taps(g);
    let config = RunConfig {
        ig_steps: 8,
        k: 20,
        ..RunConfig::default()
    }
    .with_quarter_width_tau(&taps);
    let datasets = vec![toy_dataset(g, 1), toy_dataset(g, 5)];
    Workbench::new(g, taps, datasets, config).unwrap()
}

#[test]
fn optimality_is_deterministic_and_consistent() {
    let g = toy_model();
    let wb = small_workbench(&g);
    let cfg = OptimalityConfig {
        taus: vec![2, 3],
        targets: 3,
        draws: 6,
        seed: 9,
    };
    let a = optimality_experiment(&wb, &cfg).unwrap();
    let b = optimality_experiment(&wb, &cfg).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.records.len(), 3 * 2);
    for r in &a.records {
        assert_eq!(r.random_losses.len(), 6);
        assert_eq!(r.core.len(), r.tau);
        let mean = r.random_losses.iter().map(|l| l - r.core_loss).sum::<f64>() / 6.0;
        assert!((r.mean_diff - mean).abs() < 1e-12);
    }
    for s in &a.summaries {
        assert_eq!(s.targets, 3);
        assert!(s.positive + s.negative <= 3);
    }
    assert!(!a.render().is_empty());
    let other = optimality_experiment(&wb, &OptimalityConfig { seed: 10, ..cfg.clone() }).unwrap();
    assert_ne!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&other).unwrap());
    let zero = OptimalityConfig { draws: 0, ..cfg };
    assert!(optimality_experiment(&wb, &zero).is_err());
}

#[test]
fn baseline_k_overlaps_fully() {
    let g = toy_model();
    let wb = small_workbench(&g);
    let cfg = KSensitivityConfig {
        k_values: vec![20],
        baseline: 20,
        targets_per_tap: 1,
        seed: 0,
    };
    let r = k_sensitivity_experiment(&wb, &cfg).unwrap();
    assert_eq!(r.summaries[0].mean_ratio, 1.0);
    for rec in &r.records {
        assert_eq!(rec.cores[0].overlap, rec.tau);
    }
}

#[test]
fn empty_masks_keep_recall_at_one() {
    let g = toy_model();
    let taps = toy_taps(&g);
    let relu3 = taps.by_name("relu3").unwrap().value;
    let block = Block::new(&g, relu3, g.output()).unwrap();
    let points: Vec<Tensor> = heldout_sample(&g, 10)
        .iter()
        .map(|(_, x)| neurflow::engine::forward_with_taps(&g, x, &[relu3], &[]).unwrap().taps.remove(0))
        .collect();
    let class = neurflow::patching::argmax(block.forward(&points[0]).unwrap().data());
    let eligible: Vec<&Tensor> = points
        .iter()
        .filter(|p| neurflow::patching::argmax(block.forward(p).unwrap().data()) == class)
        .collect();
    assert_eq!(recall_under_masks(&block, &eligible, class, &[]).unwrap(), 1.0);
    let retain_all = [KnockoutMask::new(relu3, std::iter::empty())];
    assert_eq!(recall_under_masks(&block, &eligible, class, &retain_all).unwrap(), 1.0);
}

#[test]
fn twelve_choose_three_is_enumerated() {
    let all = combinations(12, 3);
    assert_eq!(all.len(), 220);
    assert!(all.windows(2).all(|w| w[0] < w[1]));
}
