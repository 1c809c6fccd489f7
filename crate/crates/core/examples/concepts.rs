//! Top-k concept of one neuron, and how much of it survives when its
//! highest-scoring source channels are knocked out compared with random ones.
//!
//!     cargo run --release --example concepts -- [class] [tap] [neuron]

use std::collections::BTreeSet;
use std::path::PathBuf;

use anyhow::Result;
use neurflow::attribution::{select_core_neurons, IntegratedGradients};
use neurflow::concepts::Probe;
use neurflow::model_io::{load_model, resolve_taps, TapConfig};
use neurflow::patching::{class_dataset, PatchConfig};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let class: usize = args.first().map(|a| a.parse()).transpose()?.unwrap_or(2);
    let tap_name = args.get(1).cloned().unwrap_or_else(|| "relu3".into());
    let neuron: usize = args.get(2).map(|a| a.parse()).transpose()?.unwrap_or(0);
    let toy = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy");
    let graph = load_model(&toy.join("model.toml"))?;
    let taps = resolve_taps(&graph, &TapConfig::auto())?;
    let data = class_dataset(&graph, &toy.join("images/probe"), class, &PatchConfig::default())?;
    let probe = Probe::new(&graph, &taps, &data)?;
    let tap = taps.by_name(&tap_name)?.id;
    let k = 50;

    let concept = probe.concept(tap, neuron, k)?;
    println!("{tap_name}#{neuron} on class {class}: top activations");
    for m in concept.members.iter().take(5) {
        println!("  patch {:>14}  φ = {:.4}", m.patch, m.activation);
    }

    let tau = (probe.source_width(tap) / 4).max(1);
    let sel = select_core_neurons(&probe, tap, neuron, tau, k, &IntegratedGradients::new(32))?;
    let core = sel.core.as_set();
    let loss = probe.concept_loss(tap, neuron, &core, k)?;
    println!("core set {:?} (τ = {tau}): retention L = {loss:.3}", sel.core.neurons);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let random: Vec<f64> = (0..20)
        .map(|_| {
            let set: BTreeSet<usize> = sample(&mut rng, probe.source_width(tap), tau).into_iter().collect();
            probe.concept_loss(tap, neuron, &set, k)
        })
        .collect::<neurflow::Result<_>>()?;
    let mean = random.iter().sum::<f64>() / random.len() as f64;
    println!("20 random {tau}-subsets: mean retention L = {mean:.3}");
    Ok(())
}
