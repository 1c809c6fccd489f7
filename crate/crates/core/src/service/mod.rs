//! Local HTTP service over a circuit store, a model and its image dataset.
//!
//! | route                 | body                                             |
//! |-----------------------|--------------------------------------------------|
//! | `GET /circuits`       | circuit summaries sorted by class, then id       |
//! | `GET /circuits/{id}`  | the circuit file as stored                       |
//! | `POST /whatif`        | probabilities with and without group masks       |
//! | `POST /debug`         | per-crop group confidence for one image          |
//! | `GET /patches/{id}`   | PNG of a probe patch at model input resolution   |
//! | `GET /ui`             | static explorer files                            |
//!
//! Images in request bodies are base64 PNG or JPEG (`image`), an index into
//! the dataset listing (`image_id`) or a patch id (`patch_id`). Errors are
//! `{code, message, detail}` with a matching status.

mod error;
mod handlers;

pub use error::ApiError;
pub use handlers::{CircuitSummary, DebugRequest, Logits, WhatIfRequest, WhatIfResponse};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::routing::{get, post};
use axum::Router;
use tokio::sync::Semaphore;
use tower_http::services::ServeDir;

use crate::circuit::{load_circuit, model_hash, CircuitFile};
use crate::concepts::Probe;
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::model_io::{load_model, resolve_taps};
use crate::analysis::ConfidenceModel;
use crate::patching::{class_dataset, crop_rects, list_images, load_image, patch_id, patch_image, resize_bilinear, PatchConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub circuits: PathBuf,
    pub model: PathBuf,
    pub dataset: PathBuf,
    /// Directory served under `/ui`; a placeholder page when unset.
    pub ui: Option<PathBuf>,
    /// Concurrent what-if and debug computations.
    pub workers: usize,
}

impl ServiceConfig {
    pub fn new(circuits: impl Into<PathBuf>, model: impl Into<PathBuf>, dataset: impl Into<PathBuf>) -> Self {
        Self {
            circuits: circuits.into(),
            model: model.into(),
            dataset: dataset.into(),
            ui: None,
            workers: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        }
    }
}

/// (circuit id, masked groups, SHA-256 of the model input).
type WhatIfKey = (String, BTreeSet<usize>, String);

/// Everything a request may read. Only the caches change after startup.
pub struct SessionState {
    graph: ModelGraph,
    dataset: PathBuf,
    images: Vec<PathBuf>,
    circuits: BTreeMap<String, CircuitFile>,
    ui: Option<PathBuf>,
    maxima: Mutex<HashMap<String, Arc<Vec<Vec<f64>>>>>,
    whatif: Mutex<HashMap<WhatIfKey, Arc<Vec<u8>>>>,
    pool: Semaphore,
}

/// Circuit id of a store file: the name without `.circuit.json` or `.json`.
pub fn circuit_id(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    name.strip_suffix(".circuit.json")
        .or_else(|| name.strip_suffix(".json"))
        .map(str::to_string)
}

/// Loads every `*.json` circuit in `dir`, keyed by [`circuit_id`].
pub fn load_store(dir: &Path) -> Result<BTreeMap<String, CircuitFile>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(id) = circuit_id(&path) else { continue };
        let file = load_circuit(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        out.insert(id, file);
    }
    Ok(out)
}

impl SessionState {
    pub fn load(cfg: &ServiceConfig) -> Result<Self> {
        let graph = load_model(&cfg.model)?;
        let circuits = load_store(&cfg.circuits)?;
        Self::new(graph, circuits, &cfg.dataset, cfg.ui.clone(), cfg.workers)
    }

    pub fn new(
        graph: ModelGraph,
        circuits: BTreeMap<String, CircuitFile>,
        dataset: &Path,
        ui: Option<PathBuf>,
        workers: usize,
    ) -> Result<Self> {
        let hash = model_hash(&graph);
        for (id, c) in &circuits {
            if c.model_hash != hash {
                log::warn!("circuit {id} was extracted from a different model ({})", c.model_hash);
            }
        }
        Ok(Self {
            images: list_images(dataset)?,
            dataset: dataset.to_path_buf(),
            graph,
            circuits,
            ui,
            maxima: Mutex::default(),
            whatif: Mutex::default(),
            pool: Semaphore::new(workers.max(1)),
        })
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn circuits(&self) -> &BTreeMap<String, CircuitFile> {
        &self.circuits
    }

    pub fn circuit(&self, id: &str) -> std::result::Result<&CircuitFile, ApiError> {
        self.circuits
            .get(id)
            .ok_or_else(|| ApiError::not_found(format!("unknown circuit `{id}`")).with_detail(serde_json::json!({ "circuit": id })))
    }

    /// Dataset image `id` at its native size.
    pub fn dataset_image(&self, id: u32) -> Result<Tensor> {
        let path = self.images.get(id as usize).ok_or(Error::UnknownPatch(id as u64))?;
        load_image(path)
    }

    /// Patch pixels at model input resolution. The geometry is recovered by
    /// matching the id against every patch layout used by a stored circuit.
    pub fn patch(&self, id: u64) -> Result<Tensor> {
        let image = patch_image(id);
        if image as usize >= self.images.len() {
            return Err(Error::UnknownPatch(id));
        }
        let (h, w) = match self.graph.input_shape() {
            [3, h, w] => (*h, *w),
            other => return Err(Error::InvalidModel(format!("expected a [3,H,W] input, got {other:?}"))),
        };
        let pixels = self.dataset_image(image)?;
        let (ih, iw) = (pixels.shape()[1] as u32, pixels.shape()[2] as u32);
        for cfg in self.patch_configs() {
            if let Some((_, rect)) = crop_rects(iw, ih, &cfg).into_iter().find(|(s, r)| patch_id(image, *s, *r) == id) {
                return Ok(resize_bilinear(&pixels, rect, h, w));
            }
        }
        Err(Error::UnknownPatch(id))
    }

    fn patch_configs(&self) -> Vec<PatchConfig> {
        let mut out = vec![PatchConfig::default()];
        for c in self.circuits.values() {
            if !out.contains(&c.config.patches) {
                out.push(c.config.patches.clone());
            }
        }
        out
    }

    /// Per-level maxima over the circuit's class patches, computed once.
    pub fn maxima(&self, id: &str) -> Result<Arc<Vec<Vec<f64>>>> {
        if let Some(m) = self.maxima.lock().expect("maxima lock").get(id) {
            return Ok(m.clone());
        }
        let circuit = &self.circuits[id];
        let taps = resolve_taps(&self.graph, &circuit.config.taps)?;
        let data = class_dataset(&self.graph, &self.dataset, circuit.class, &circuit.config.patches)?;
        let probe = Probe::new(&self.graph, &taps, &data)?;
        let m = Arc::new(ConfidenceModel::new(circuit, &probe)?.maxima().to_vec());
        self.maxima.lock().expect("maxima lock").insert(id.to_string(), m.clone());
        Ok(m)
    }
}

pub fn router(state: Arc<SessionState>) -> Router {
    let api = Router::new()
        .route("/circuits", get(handlers::list_circuits))
        .route("/circuits/{id}", get(handlers::get_circuit))
        .route("/whatif", post(handlers::whatif))
        .route("/debug", post(handlers::debug))
        .route("/patches/{id}", get(handlers::get_patch));
    let api = match &state.ui {
        Some(dir) => api.nest_service("/ui", ServeDir::new(dir)),
        None => api.route("/ui", get(handlers::ui_placeholder)),
    };
    api.fallback(handlers::not_found).with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: Arc<SessionState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
