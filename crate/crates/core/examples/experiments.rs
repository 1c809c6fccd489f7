//! Runs the experiment harnesses on the bundled toy model.
//!
//!     cargo run --release --example experiments -- [optimality|oracle|fidelity|correlation|ksens|all]

use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;
use neurflow::analysis::{
    core_oracle_experiment, correlation_experiment, fidelity_experiment, k_sensitivity_experiment, optimality_experiment,
    CoreOracleConfig, CorrelationConfig, FidelityConfig, KSensitivityConfig, OptimalityConfig, Workbench,
};
use neurflow::config::RunConfig;
use neurflow::model_io::{load_toy_model_files, resolve_taps, TapConfig};
use neurflow::patching::load_model_inputs;

fn main() -> Result<()> {
    let which = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    let toy = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy");
    let graph = load_toy_model_files(&toy.join("model.toml"))?;
    let taps = resolve_taps(&graph, &TapConfig::auto())?;
    let config = RunConfig::default().with_quarter_width_tau(&taps);
    let classes: Vec<usize> = (0..10).collect();
    let wb = Workbench::load(&graph, taps, &toy.join("images/probe"), &classes, config)?;
    let run = |name: &str| which == "all" || which == name;

    if run("optimality") {
        let t = Instant::now();
        let r = optimality_experiment(&wb, &OptimalityConfig::default())?;
        println!("== optimality ({:.1?})\n{}", t.elapsed(), r.render());
    }
    if run("oracle") {
        let t = Instant::now();
        let r = core_oracle_experiment(&wb, &CoreOracleConfig::default())?;
        println!("== core-set oracle ({:.1?})\n{}", t.elapsed(), r.render());
    }
    if run("fidelity") {
        let t = Instant::now();
        let heldout: Vec<_> = load_model_inputs(&graph, &toy.join("images/heldout"))?.into_iter().map(|(_, x)| x).collect();
        let r = fidelity_experiment(&wb, &heldout, &FidelityConfig::default())?;
        println!("== fidelity ({:.1?})\n{}", t.elapsed(), r.render());
        let multi = FidelityConfig {
            down_to: Some("relu2".into()),
            ..FidelityConfig::default()
        };
        let r = fidelity_experiment(&wb, &heldout, &multi)?;
        println!("{}", r.render());
    }
    if run("correlation") {
        let t = Instant::now();
        let r = correlation_experiment(&wb, &CorrelationConfig::default())?;
        println!("== correlation ({:.1?})\n{}", t.elapsed(), r.render());
    }
    if run("ksens") {
        let t = Instant::now();
        let r = k_sensitivity_experiment(&wb, &KSensitivityConfig::default())?;
        println!("== k sensitivity ({:.1?})\n{}", t.elapsed(), r.render());
    }
    Ok(())
}
