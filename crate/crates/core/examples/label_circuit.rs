//! Captions every group of the golden circuit and explains each parent from
//! its children. Uses the HTTP endpoint named by NEURFLOW_LABEL_ENDPOINT
//! (with NEURFLOW_LABEL_API_KEY and NEURFLOW_LABEL_MODEL) when set, and a
//! canned mock otherwise. Answers are cached on disk by request hash.
//!
//!     cargo run --example label_circuit -- [cache_dir]

use std::path::PathBuf;

use anyhow::Result;
use neurflow::circuit::load_circuit;
use neurflow::labeling::{label_circuit, CachedClient, HttpClient, HttpConfig, LabelClient, MockClient, RequestKind};
use neurflow::model_io::load_model;
use neurflow::patching::{class_dataset, tensor_image};

fn main() -> Result<()> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let cache = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("neurflow_label_cache"));
    let mut circuit = load_circuit(&root.join("golden/toy_class0.circuit.json"))?;
    let graph = load_model(&root.join("toy/model.toml"))?;
    let data = class_dataset(&graph, &root.join("toy/images/probe"), circuit.class, &circuit.config.patches)?;

    let client: Box<dyn LabelClient> = match HttpConfig::from_env() {
        Ok(cfg) => Box::new(CachedClient::new(HttpClient::new(cfg)?, &cache)?),
        Err(_) => {
            println!("NEURFLOW_LABEL_ENDPOINT is not set; using a mock client");
            Box::new(MockClient::new(|req| match req.kind {
                RequestKind::Caption => "- Common features: colour blob, soft edge\n- Caption: A soft-edged colour blob.".into(),
                RequestKind::Relation => {
                    "Feature Evolution:\n- Group 2: has soft edge - match blob outline in Group 1\nCaption: Edges merge into a blob.".into()
                }
            }))
        }
    };
    let images = |id: u64| Ok(tensor_image(&data.get(id)?.pixels));
    let labels = label_circuit(&mut circuit, &images, client.as_ref(), 3)?;
    for g in &circuit.groups {
        println!("group {} at {}: {}", g.id, circuit.levels[g.level].name, g.label.as_deref().unwrap_or("(unlabeled)"));
    }
    for (parent, r) in &labels.relations {
        for e in &r.parsed.evolution {
            println!("  group {parent} <- Group {}: {}", e.group, e.text);
        }
    }
    Ok(())
}
