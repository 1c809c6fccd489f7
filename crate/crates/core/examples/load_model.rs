//! Loads the toy model from its descriptor and from ONNX, then prints the
//! graph and the automatically chosen taps.
//!
//!     cargo run --example load_model [-- path/to/model.onnx]

use std::path::PathBuf;

use anyhow::Result;
use neurflow::circuit::model_hash;
use neurflow::model_io::{load_model, resolve_taps, TapConfig};

fn main() -> Result<()> {
    let toy = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy");
    let path = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| toy.join("model.onnx"));
    let graph = load_model(&path)?;
    println!("{}: input {:?}, output {:?}", path.display(), graph.input_shape(), graph.output_shape());
    for node in graph.nodes() {
        let out = graph.value(node.output);
        println!("  {:<10} {:<18} -> {:?}", node.op.kind(), out.name, out.shape);
    }
    let taps = resolve_taps(&graph, &TapConfig::auto())?;
    for t in taps.taps() {
        println!("tap {} `{}` width {}", t.id, t.name, t.width);
    }
    let from_toml = load_model(&toy.join("model.toml"))?;
    println!(
        "descriptor and ONNX encode the same model: {}",
        model_hash(&from_toml) == model_hash(&load_model(&toy.join("model.onnx"))?)
    );
    Ok(())
}
