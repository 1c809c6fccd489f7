//! Extracts the circuit for one class, saves it and prints it layer by
//! layer with group-to-group weights.
//!
//!     cargo run --release --example extract_circuit -- [class] [out.json]

use std::path::PathBuf;

use anyhow::Result;
use neurflow::attribution::IntegratedGradients;
use neurflow::circuit::{extract_circuit, load_circuit, save_circuit};
use neurflow::concepts::Probe;
use neurflow::config::RunConfig;
use neurflow::model_io::{load_model, resolve_taps, TapConfig};
use neurflow::patching::class_dataset;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let class: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(0);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join(format!("class{class}.circuit.json")));
    let toy = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy");
    let graph = load_model(&toy.join("model.toml"))?;
    let taps = resolve_taps(&graph, &TapConfig::auto())?;
    let cfg = RunConfig::default().with_quarter_width_tau(&taps);
    let data = class_dataset(&graph, &toy.join("images/probe"), class, &cfg.patches)?;
    let probe = Probe::new(&graph, &taps, &data)?;

    let circuit = extract_circuit(&probe, class, &cfg, &IntegratedGradients::new(cfg.ig_steps), data.manifest.hash())?;
    save_circuit(&circuit, &out)?;
    assert_eq!(load_circuit(&out)?, circuit);
    println!("wrote {} (checksum {})", out.display(), &circuit.checksum[..12]);

    let nc = circuit.neuron_circuit();
    for (l, level) in circuit.levels.iter().enumerate().rev() {
        println!("{:<8} neurons {:?}", level.name, nc.neurons_at(l));
        for g in circuit.groups.iter().filter(|g| g.level == l) {
            println!("         group {} = {:?}, |V_G| = {}", g.id, g.neurons, g.patches.len());
        }
    }
    for e in &circuit.group_edges {
        println!("W(group {} -> group {}) = {:+.4}", e.child, e.parent, e.weight);
    }
    Ok(())
}
