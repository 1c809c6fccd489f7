//! Builds the multi-scale patch dataset for one class and writes a contact
//! sheet of its first patches.
//!
//!     cargo run --example patches -- [class] [out.png]

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::Result;
use neurflow::labeling::tile_exemplars;
use neurflow::model_io::load_model;
use neurflow::patching::{class_dataset, tensor_image, PatchConfig};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let class: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(3);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("neurflow_patches.png"));
    let toy = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy");
    let graph = load_model(&toy.join("model.toml"))?;

    let data = class_dataset(&graph, &toy.join("images/probe"), class, &PatchConfig::default())?;
    println!("class {class}: {} images kept, {} patches", data.manifest.images.len(), data.len());
    let mut per_scale: BTreeMap<String, usize> = BTreeMap::new();
    for p in &data.patches {
        *per_scale.entry(format!("{:.2}", p.scale)).or_default() += 1;
    }
    for (scale, n) in per_scale {
        println!("  scale {scale}: {n} patches");
    }
    println!("manifest hash {}", data.manifest.hash());

    let first: Vec<_> = data.patches.iter().take(16).map(|p| tensor_image(&p.pixels)).collect();
    if let Some(sheet) = tile_exemplars(&first, 8) {
        sheet.save(&out)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}
