//! Integrated-gradients importance of every source channel for one target
//! neuron, its core set and the branch weights of its edges per semantic
//! group.
//!
//!     cargo run --release --example attribution -- [class] [tap] [neuron]

use std::path::PathBuf;

use anyhow::Result;
use neurflow::attribution::{branch_weights, rank_by_magnitude, select_core_neurons, IntegratedGradients};
use neurflow::concepts::Probe;
use neurflow::grouping::{split_semantic_groups, GroupingConfig};
use neurflow::model_io::{load_model, resolve_taps, TapConfig};
use neurflow::patching::{class_dataset, PatchConfig};

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let class: usize = args.first().map(|a| a.parse()).transpose()?.unwrap_or(7);
    let tap_name = args.get(1).cloned().unwrap_or_else(|| "logits".into());
    let toy = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy");
    let graph = load_model(&toy.join("model.toml"))?;
    let taps = resolve_taps(&graph, &TapConfig::auto())?;
    let tap = taps.by_name(&tap_name)?.id;
    let neuron: usize = args.get(2).map(|a| a.parse()).transpose()?.unwrap_or(class);
    let data = class_dataset(&graph, &toy.join("images/probe"), class, &PatchConfig::default())?;
    let probe = Probe::new(&graph, &taps, &data)?;

    let tau = (probe.source_width(tap) / 4).max(1);
    let sel = select_core_neurons(&probe, tap, neuron, tau, 50, &IntegratedGradients::new(50))?;
    let scores = sel.table.scores();
    println!("T({tap_name}#{neuron}, s, V) over {} concept patches:", sel.concept.len());
    for s in rank_by_magnitude(&scores) {
        let mark = if sel.core.neurons.contains(&s) { "*" } else { " " };
        println!("  {mark} source {s:>2}: {:+.4}", scores[s]);
    }
    println!("core set (τ = {tau}): {:?}", sel.core.neurons);
    // One edge per core neuron and semantic group of the target's concept.
    for g in split_semantic_groups(&probe, tap, &sel.concept, &GroupingConfig::default())? {
        let ws = branch_weights(&sel.core.neurons, &sel.table.scores_over(&g.patches));
        let line: Vec<String> = ws.iter().map(|w| format!("{}: {:+.3}", w.child, w.weight)).collect();
        println!("  semantic group {} ({} patches): {}", g.index, g.patches.len(), line.join(", "));
    }
    Ok(())
}
