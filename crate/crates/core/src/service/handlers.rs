use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::header;
use axum::response::{Html, IntoResponse, Response};
use axum::Json;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ApiError, SessionState};
use crate::analysis::{debug_image, group_masks, ConfidenceModel};
use crate::circuit::CircuitFile;
use crate::engine::forward_with_taps;
use crate::patching::{image_tensor, model_input, png_bytes, tensor_image};
use crate::tensor::Tensor;

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitSummary {
    pub id: String,
    pub class: usize,
    pub version: String,
    pub model_hash: String,
    pub dataset_hash: String,
    pub levels: Vec<String>,
    pub nodes: usize,
    pub groups: usize,
    pub k: usize,
    pub ig_steps: usize,
    pub tau: usize,
    pub tau_per_tap: BTreeMap<String, usize>,
    pub labeled: bool,
}

impl CircuitSummary {
    pub fn of(id: &str, c: &CircuitFile) -> Self {
        Self {
            id: id.to_string(),
            class: c.class,
            version: c.version.clone(),
            model_hash: c.model_hash.clone(),
            dataset_hash: c.dataset_hash.clone(),
            levels: c.levels.iter().map(|l| l.name.clone()).collect(),
            nodes: c.nodes.len(),
            groups: c.groups.len(),
            k: c.config.k,
            ig_steps: c.config.ig_steps,
            tau: c.config.tau,
            tau_per_tap: c.config.tau_per_tap.clone(),
            labeled: c.groups.iter().any(|g| g.label.is_some()),
        }
    }
}

/// Exactly one of `image`, `image_id` and `patch_id` must be set.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ImageSource {
    /// Base64 PNG or JPEG.
    #[serde(default)]
    pub image: Option<String>,
    #[serde(default)]
    pub image_id: Option<u32>,
    #[serde(default)]
    pub patch_id: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WhatIfRequest {
    pub circuit: String,
    #[serde(default)]
    pub groups: Vec<usize>,
    #[serde(flatten)]
    pub source: ImageSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Logits {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhatIfResponse {
    pub circuit: String,
    pub class: usize,
    /// Masked groups, ascending and deduplicated.
    pub groups: Vec<usize>,
    pub baseline: Logits,
    pub masked: Logits,
    /// `masked − baseline` per class.
    pub probability_delta: Vec<f64>,
    /// Logit of the circuit's class, `baseline − masked`.
    pub logit_drop: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DebugRequest {
    pub circuit: String,
    /// Level name to score at.
    #[serde(default)]
    pub tap: Option<String>,
    /// Per-group thresholds; crops above them are flagged.
    #[serde(default)]
    pub thresholds: BTreeMap<usize, f64>,
    #[serde(flatten)]
    pub source: ImageSource,
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request("malformed request body").with_detail(e.to_string().into()))
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn tensor_hash(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn logits(values: Vec<f64>) -> Logits {
    Logits {
        probabilities: softmax(&values),
        logits: values,
    }
}

/// The requested image at native size, or the patch at input size.
fn resolve_image(state: &SessionState, src: &ImageSource) -> ApiResult<Tensor> {
    let given = usize::from(src.image.is_some()) + usize::from(src.image_id.is_some()) + usize::from(src.patch_id.is_some());
    if given != 1 {
        return Err(ApiError::unprocessable("set exactly one of `image`, `image_id` and `patch_id`"));
    }
    if let Some(data) = &src.image {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(data.trim())
            .map_err(|e| ApiError::bad_request("image is not valid base64").with_detail(e.to_string().into()))?;
        let img = image::load_from_memory(&bytes)
            .map_err(|e| ApiError::bad_request("image could not be decoded").with_detail(e.to_string().into()))?;
        return Ok(image_tensor(&img.to_rgb8()));
    }
    if let Some(id) = src.image_id {
        if id as usize >= state.images.len() {
            return Err(ApiError::not_found(format!("unknown image id {id}")).with_detail(serde_json::json!({ "image_id": id })));
        }
        return Ok(state.dataset_image(id)?);
    }
    let id = src.patch_id.expect("one source is set");
    Ok(state.patch(id)?)
}

pub async fn list_circuits(State(state): State<Arc<SessionState>>) -> Json<Vec<CircuitSummary>> {
    let mut out: Vec<CircuitSummary> = state.circuits.iter().map(|(id, c)| CircuitSummary::of(id, c)).collect();
    out.sort_by(|a, b| a.class.cmp(&b.class).then_with(|| a.id.cmp(&b.id)));
    Json(out)
}

pub async fn get_circuit(State(state): State<Arc<SessionState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let c = state.circuit(&id)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], c.to_json()).into_response())
}

fn compute_whatif(state: &SessionState, req: &WhatIfRequest) -> ApiResult<Vec<u8>> {
    let circuit = state.circuit(&req.circuit)?;
    let groups: BTreeSet<usize> = req.groups.iter().copied().collect();
    for &g in &groups {
        circuit.group(g)?;
    }
    let image = resolve_image(state, &req.source)?;
    let x = model_input(&state.graph, &image)?;
    let key = (req.circuit.clone(), groups.clone(), tensor_hash(&x));
    if let Some(body) = state.whatif.lock().expect("whatif lock").get(&key) {
        return Ok(body.as_ref().clone());
    }
    let ids: Vec<usize> = groups.iter().copied().collect();
    let masks = group_masks(&state.graph, circuit, &ids)?;
    let base = forward_with_taps(&state.graph, &x, &[], &[])?.logits.data().to_vec();
    let masked = forward_with_taps(&state.graph, &x, &[], &masks)?.logits.data().to_vec();
    let c = circuit.class;
    let baseline = logits(base);
    let masked = logits(masked);
    let resp = WhatIfResponse {
        circuit: req.circuit.clone(),
        class: c,
        groups: ids,
        probability_delta: masked
            .probabilities
            .iter()
            .zip(&baseline.probabilities)
            .map(|(m, b)| m - b)
            .collect(),
        logit_drop: baseline.logits[c] - masked.logits[c],
        baseline,
        masked,
    };
    let body = serde_json::to_vec(&resp).map_err(|e| ApiError::internal(e.to_string()))?;
    state.whatif.lock().expect("whatif lock").insert(key, Arc::new(body.clone()));
    Ok(body)
}

fn json_bytes(body: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], body).into_response()
}

/// Runs `f` on the blocking pool once a worker slot is free.
async fn queued<T: Send + 'static>(
    state: &Arc<SessionState>,
    f: impl FnOnce(&SessionState) -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    let _permit = state.pool.acquire().await.map_err(|e| ApiError::internal(e.to_string()))?;
    let st = state.clone();
    tokio::task::spawn_blocking(move || f(&st))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

pub async fn whatif(State(state): State<Arc<SessionState>>, body: Bytes) -> ApiResult<Response> {
    let req: WhatIfRequest = parse_body(&body)?;
    let body = queued(&state, move |st| compute_whatif(st, &req)).await?;
    Ok(json_bytes(body))
}

fn compute_debug(state: &SessionState, req: &DebugRequest) -> ApiResult<Vec<u8>> {
    let circuit = state.circuit(&req.circuit)?;
    let tap = req
        .tap
        .as_deref()
        .ok_or_else(|| ApiError::unprocessable("`tap` is required"))?;
    if !circuit.levels.iter().any(|l| l.name == tap) {
        return Err(ApiError::unprocessable(format!("circuit `{}` has no level `{tap}`", req.circuit))
            .with_detail(serde_json::json!({ "tap": tap })));
    }
    for &g in req.thresholds.keys() {
        circuit.group(g)?;
    }
    let image = resolve_image(state, &req.source)?;
    let maxima = state.maxima(&req.circuit)?;
    let model = ConfidenceModel::with_maxima(&state.graph, circuit, maxima.as_ref().clone())?;
    let report = debug_image(&model, &image, tap, &req.thresholds, &circuit.config.patches)?;
    serde_json::to_vec(&report).map_err(|e| ApiError::internal(e.to_string()))
}

pub async fn debug(State(state): State<Arc<SessionState>>, body: Bytes) -> ApiResult<Response> {
    let req: DebugRequest = parse_body(&body)?;
    let body = queued(&state, move |st| compute_debug(st, &req)).await?;
    Ok(json_bytes(body))
}

pub async fn get_patch(State(state): State<Arc<SessionState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let pid: u64 = id
        .parse()
        .map_err(|_| ApiError::not_found(format!("unknown patch id `{id}`")).with_detail(serde_json::json!({ "patch": id })))?;
    let png = queued(&state, move |st| Ok(png_bytes(&tensor_image(&st.patch(pid)?))?)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

pub async fn ui_placeholder() -> Html<&'static str> {
    Html(
        "<!doctype html><title>neurflow</title>\
         <p>No explorer build configured. API: <code>GET /circuits</code>, <code>GET /circuits/{id}</code>, \
         <code>POST /whatif</code>, <code>POST /debug</code>, <code>GET /patches/{id}</code>.</p>",
    )
}

pub async fn not_found() -> ApiError {
    ApiError::not_found("no such route")
}
