use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use neurflow::analysis::{
    core_oracle_experiment, correlation_experiment, fidelity_experiment, k_sensitivity_experiment, optimality_experiment,
    CoreOracleConfig, CorrelationConfig, FidelityConfig, KSensitivityConfig, OptimalityConfig, Workbench,
};
use neurflow::attribution::IntegratedGradients;
use neurflow::circuit::{extract_circuit, save_circuit};
use neurflow::concepts::Probe;
use neurflow::config::RunConfig;
use neurflow::model_io::{load_model, resolve_taps};
use neurflow::patching::{class_dataset, load_model_inputs};
use neurflow::service::{serve, ServiceConfig, SessionState};

#[derive(Parser)]
#[command(name = "neurflow", version, about = "Concept-circuit extraction for convolutional classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment harness and print its report.
    Exp {
        #[arg(value_enum)]
        kind: Experiment,
        #[command(flatten)]
        data: DataArgs,
        /// Held-out images for fidelity; defaults to --dataset.
        #[arg(long)]
        heldout: Option<PathBuf>,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Extract one circuit file per class.
    Extract {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve circuits and what-if queries over HTTP.
    Serve {
        #[arg(long)]
        circuits: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: IpAddr,
        /// Static explorer build served under /ui.
        #[arg(long)]
        ui: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Experiment {
    Optimality,
    Oracle,
    Fidelity,
    Correlation,
    Ksens,
}

#[derive(clap::Args)]
struct DataArgs {
    /// `.onnx` model or toy `.toml` descriptor.
    #[arg(long)]
    model: PathBuf,
    /// Directory of class images.
    #[arg(long)]
    dataset: PathBuf,
    /// Run configuration (TOML). Without one, τ is a quarter of each tap's width.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated class ids; defaults to every output class.
    #[arg(long, value_delimiter = ',')]
    classes: Vec<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn run_config(data: &DataArgs, taps: &neurflow::model_io::TapSpec) -> Result<RunConfig> {
    let mut cfg = match &data.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default().with_quarter_width_tau(taps),
    };
    if let Some(seed) = data.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn classes(data: &DataArgs, graph: &neurflow::graph::ModelGraph) -> Vec<usize> {
    if data.classes.is_empty() {
        (0..graph.output_shape().iter().product()).collect()
    } else {
        data.classes.clone()
    }
}

fn exp(kind: Experiment, data: &DataArgs, heldout: Option<&Path>, json: bool) -> Result<()> {
    let graph = load_model(&data.model)?;
    let cfg = run_config(data, &resolve_taps(&graph, &RunConfig::default().taps)?)?;
    let taps = resolve_taps(&graph, &cfg.taps)?;
    let seed = cfg.seed;
    let wb = Workbench::load(&graph, taps, &data.dataset, &classes(data, &graph), cfg)?;
    let (text, value) = match kind {
        Experiment::Optimality => {
            let r = optimality_experiment(&wb, &OptimalityConfig { seed, ..Default::default() })?;
            (r.render(), serde_json::to_value(&r)?)
        }
        Experiment::Oracle => {
            let r = core_oracle_experiment(&wb, &CoreOracleConfig { seed, ..Default::default() })?;
            (r.render(), serde_json::to_value(&r)?)
        }
        Experiment::Fidelity => {
            let dir = heldout.unwrap_or(&data.dataset);
            let images: Vec<_> = load_model_inputs(&graph, dir)?.into_iter().map(|(_, x)| x).collect();
            let r = fidelity_experiment(&wb, &images, &FidelityConfig { seed, ..Default::default() })?;
            (r.render(), serde_json::to_value(&r)?)
        }
        Experiment::Correlation => {
            let r = correlation_experiment(&wb, &CorrelationConfig { seed, ..Default::default() })?;
            (r.render(), serde_json::to_value(&r)?)
        }
        Experiment::Ksens => {
            let r = k_sensitivity_experiment(&wb, &KSensitivityConfig { seed, ..Default::default() })?;
            (r.render(), serde_json::to_value(&r)?)
        }
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&value)?);
    } else {
        println!("{text}");
    }
    Ok(())
}

fn extract(data: &DataArgs, out: &Path) -> Result<()> {
    let graph = load_model(&data.model)?;
    let cfg = run_config(data, &resolve_taps(&graph, &RunConfig::default().taps)?)?;
    let taps = resolve_taps(&graph, &cfg.taps)?;
    std::fs::create_dir_all(out)?;
    let scorer = IntegratedGradients::new(cfg.ig_steps);
    for class in classes(data, &graph) {
        let ds = match class_dataset(&graph, &data.dataset, class, &cfg.patches) {
            Ok(ds) => ds,
            Err(e) => {
                log::warn!("class {class}: {e}");
                continue;
            }
        };
        let probe = Probe::new(&graph, &taps, &ds)?;
        let circuit = extract_circuit(&probe, class, &cfg, &scorer, ds.manifest.hash())?;
        let path = out.join(format!("class{class}.circuit.json"));
        save_circuit(&circuit, &path)?;
        println!("{}: {} nodes, {} groups", path.display(), circuit.nodes.len(), circuit.groups.len());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Exp { kind, data, heldout, json } => exp(kind, &data, heldout.as_deref(), json),
        Command::Extract { data, out } => extract(&data, &out),
        Command::Serve {
            circuits,
            model,
            dataset,
            port,
            bind,
            ui,
        } => {
            if !circuits.is_dir() {
                bail!("circuit store {} is not a directory", circuits.display());
            }
            let mut cfg = ServiceConfig::new(circuits, model, dataset);
            cfg.ui = ui;
            let state = Arc::new(SessionState::load(&cfg)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(state, SocketAddr::new(bind, port)))?;
            Ok(())
        }
    }
}
