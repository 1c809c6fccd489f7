//! Splits each core neuron's concept into semantic groups by silhouette
//! search, then merges neurons that share semantic content into groups.
//!
//!     cargo run --release --example grouping -- [class] [tap]

use std::path::PathBuf;

use anyhow::Result;
use neurflow::concepts::Probe;
use neurflow::grouping::{form_neuron_groups, split_semantic_groups, GroupingConfig};
use neurflow::model_io::{load_model, resolve_taps, TapConfig};
use neurflow::patching::{class_dataset, PatchConfig};

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let class: usize = args.first().map(|a| a.parse()).transpose()?.unwrap_or(5);
    let tap_name = args.get(1).cloned().unwrap_or_else(|| "relu3".into());
    let toy = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy");
    let graph = load_model(&toy.join("model.toml"))?;
    let taps = resolve_taps(&graph, &TapConfig::auto())?;
    let tap = taps.by_name(&tap_name)?;
    let data = class_dataset(&graph, &toy.join("images/probe"), class, &PatchConfig::default())?;
    let probe = Probe::new(&graph, &taps, &data)?;
    let cfg = GroupingConfig::default();

    // The eight most active neurons of the tap on this class stand in for a core set.
    let mut by_max: Vec<(f64, usize)> = (0..tap.width)
        .map(|n| Ok((probe.max_activation(tap.id, n)?, n)))
        .collect::<neurflow::Result<_>>()?;
    by_max.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let neurons: Vec<usize> = by_max.iter().take(8).map(|&(_, n)| n).collect();

    let mut semantic = Vec::new();
    for &n in &neurons {
        let groups = split_semantic_groups(&probe, tap.id, &probe.concept(tap.id, n, 50)?, &cfg)?;
        let sizes: Vec<usize> = groups.iter().map(|g| g.patches.len()).collect();
        println!("{tap_name}#{n}: {} semantic group(s) of sizes {sizes:?}", groups.len());
        semantic.extend(groups);
    }
    for g in form_neuron_groups(&neurons, &semantic, &cfg)? {
        println!("neuron group {:?}: {} shared patches", g.neurons, g.patches.len());
    }
    Ok(())
}
