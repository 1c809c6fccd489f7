//! Scores every crop of a held-out image against the circuit's groups at one
//! tap, flags crops above each group's 90th-percentile probe score, writes
//! the flagged crops as a PNG and ranks images by logit drop.
//!
//!     cargo run --release --example debug_image -- [image.png] [tap] [out.png]

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{Context, Result};
use neurflow::analysis::{contact_sheet, debug_image, logit_drop_ranking, ConfidenceModel};
use neurflow::circuit::load_circuit;
use neurflow::concepts::Probe;
use neurflow::model_io::{load_model, resolve_taps};
use neurflow::patching::{class_dataset, list_images, load_image, load_model_inputs};

fn main() -> Result<()> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let toy = root.join("toy");
    let mut args = std::env::args().skip(1);
    let image_path = match args.next() {
        Some(p) => PathBuf::from(p),
        None => list_images(&toy.join("images/heldout"))?.into_iter().next().context("no held-out images")?,
    };
    let tap = args.next().unwrap_or_else(|| "relu3".into());
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("neurflow_debug.png"));

    let graph = load_model(&toy.join("model.toml"))?;
    let circuit = load_circuit(&root.join("golden/toy_class0.circuit.json"))?;
    let taps = resolve_taps(&graph, &circuit.config.taps)?;
    let data = class_dataset(&graph, &toy.join("images/probe"), circuit.class, &circuit.config.patches)?;
    let probe = Probe::new(&graph, &taps, &data)?;
    let model = ConfidenceModel::new(&circuit, &probe)?;

    let level = model.level_by_name(&tap)?;
    let mut thresholds = BTreeMap::new();
    for g in circuit.groups.iter().filter(|g| g.level == level) {
        let mut scores = model.dataset_scores(&probe, g.id)?;
        scores.sort_by(f64::total_cmp);
        let t = scores[(scores.len() * 9) / 10];
        println!("group {} ({:?}): representatives {:?}, threshold {t:.4}", g.id, g.neurons, model.representatives(g.id)?);
        thresholds.insert(g.id, t);
    }

    let image = load_image(&image_path)?;
    let report = debug_image(&model, &image, &tap, &thresholds, &circuit.config.patches)?;
    let flagged = report.crops.iter().filter(|c| !c.flagged.is_empty()).count();
    println!("{}: {flagged} of {} crops flagged at {tap}", image_path.display(), report.crops.len());
    for c in report.crops.iter().filter(|c| !c.flagged.is_empty()).take(5) {
        let s: Vec<String> = c.scores.iter().map(|s| format!("G{} {:.3}", s.group, s.value)).collect();
        println!("  crop {:?} at scale {}: {}", c.rect, c.scale, s.join(", "));
    }
    if let Some(sheet) = contact_sheet(&image, &report) {
        sheet.save(&out)?;
        println!("wrote {}", out.display());
    }

    let images: Vec<_> = load_model_inputs(&graph, &toy.join("images/heldout"))?
        .into_iter()
        .enumerate()
        .map(|(i, (_, x))| (i as u64, x))
        .collect();
    let group = circuit.groups.iter().find(|g| g.level == level).context("no group at tap")?;
    println!("largest class-{} logit drops when group {} is masked:", circuit.class, group.id);
    for d in logit_drop_ranking(&graph, &circuit, group.id, &images, circuit.class, 5)? {
        println!("  image {:>3}: {:+.3} -> {:+.3} (drop {:.3})", d.image, d.unmasked, d.masked, d.delta);
    }
    Ok(())
}
