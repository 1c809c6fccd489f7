mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::Engine as _;
use common::{fixtures, probe_dir, toy_model};
use http_body_util::BodyExt;
use image::{Rgb, RgbImage};
use neurflow::analysis::{logit_drop_ranking, DebugReport};
use neurflow::circuit::{load_circuit, save_circuit, CircuitFile};
use neurflow::labeling::{label_circuit, MockClient};
use neurflow::patching::{crop_rects, model_input, patch_id, png_bytes};
use neurflow::service::{router, CircuitSummary, ServiceConfig, SessionState, WhatIfResponse};
use serde_json::{json, Value};
use tower::ServiceExt;

fn golden() -> CircuitFile {
    load_circuit(&fixtures().join("golden/toy_class0.circuit.json")).unwrap()
}

fn app_with(store: &Path) -> (Router, Arc<SessionState>) {
    let mut cfg = ServiceConfig::new(store, fixtures().join("toy/model.toml"), probe_dir());
    cfg.workers = 2;
    let state = Arc::new(SessionState::load(&cfg).unwrap());
    (router(state.clone()), state)
}

fn golden_store() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    save_circuit(&golden(), &dir.path().join("toy_class0.circuit.json")).unwrap();
    dir
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => req
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&v).unwrap())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn json_of(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

fn assert_error(status: StatusCode, body: &[u8], want: StatusCode, code: &str) {
    assert_eq!(status, want, "{}", String::from_utf8_lossy(body));
    let v = json_of(body);
    assert_eq!(v["code"], code);
    assert!(v["message"].as_str().is_some_and(|m| !m.is_empty()));
    assert!(v.get("detail").is_some());
}

fn png_b64(img: &RgbImage) -> String {
    base64::engine::general_purpose::STANDARD.encode(png_bytes(img).unwrap())
}

#[tokio::test]
async fn empty_store_lists_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app_with(dir.path());
    let (status, body) = call(&app, "GET", "/circuits", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_of(&body), json!([]));
}

#[tokio::test]
async fn circuits_are_listed_by_class() {
    let dir = tempfile::tempdir().unwrap();
    let g = golden();
    let mut other = g.clone();
    other.class = 3;
    other.reseal();
    save_circuit(&g, &dir.path().join("z_first.circuit.json")).unwrap();
    save_circuit(&other, &dir.path().join("a_second.json")).unwrap();
    std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    let (app, _) = app_with(dir.path());
    let (_, body) = call(&app, "GET", "/circuits", None).await;
    let list: Vec<CircuitSummary> = serde_json::from_slice(&body).unwrap();
    let ids: Vec<(&str, usize)> = list.iter().map(|s| (s.id.as_str(), s.class)).collect();
    assert_eq!(ids, [("z_first", 0), ("a_second", 3)]);
    let s = &list[0];
    assert_eq!(s.model_hash, g.model_hash);
    assert_eq!(s.dataset_hash, g.dataset_hash);
    assert_eq!(s.version, g.version);
    assert_eq!(s.levels, ["relu1", "relu2", "relu3", "logits"]);
    assert_eq!((s.nodes, s.groups), (g.nodes.len(), g.groups.len()));
    assert_eq!((s.k, s.ig_steps, s.tau), (g.config.k, g.config.ig_steps, g.config.tau));
    assert!(!s.labeled);
}

#[tokio::test]
async fn circuit_payload_equals_stored_file() {
    let store = golden_store();
    let (app, _) = app_with(store.path());
    let (status, body) = call(&app, "GET", "/circuits/toy_class0", None).await;
    assert_eq!(status, StatusCode::OK);
    let payload = CircuitFile::from_json(std::str::from_utf8(&body).unwrap()).unwrap();
    assert_eq!(payload, golden());
    let (status, body) = call(&app, "GET", "/circuits/nope", None).await;
    assert_error(status, &body, StatusCode::NOT_FOUND, "not_found");
}

#[tokio::test]
async fn labeled_circuit_payload_carries_labels() {
    let store = tempfile::tempdir().unwrap();
    let (_, state) = app_with(golden_store().path());
    let mut c = golden();
    let client = MockClient::new(|req| format!("- Caption: concept {}", req.exemplars[0].group.unwrap_or(99)));
    let images = |id: u64| Ok(neurflow::patching::tensor_image(&state.patch(id)?));
    label_circuit(&mut c, &images, &client, 3).unwrap();
    save_circuit(&c, &store.path().join("labeled.circuit.json")).unwrap();
    let (app, _) = app_with(store.path());
    let (_, body) = call(&app, "GET", "/circuits/labeled", None).await;
    let v = json_of(&body);
    let labels: Vec<&str> = v["groups"].as_array().unwrap().iter().map(|g| g["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["concept 0", "concept 1", "concept 2", "concept 3"]);
    let (_, body) = call(&app, "GET", "/circuits", None).await;
    assert_eq!(json_of(&body)[0]["labeled"], true);
}

async fn whatif(app: &Router, body: Value) -> (StatusCode, Vec<u8>) {
    call(app, "POST", "/whatif", Some(body)).await
}

#[tokio::test]
async fn whatif_with_no_masks_changes_nothing() {
    let store = golden_store();
    let (app, _) = app_with(store.path());
    let (status, body) = whatif(&app, json!({ "circuit": "toy_class0", "groups": [], "image_id": 0 })).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let r: WhatIfResponse = serde_json::from_slice(&body).unwrap();
    assert!(r.probability_delta.iter().all(|&d| d == 0.0));
    assert_eq!(r.logit_drop, 0.0);
    assert_eq!(r.baseline, r.masked);
    let total: f64 = r.baseline.probabilities.iter().sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[tokio::test]
async fn whatif_masking_twice_is_masking_once_and_repeats_are_bit_equal() {
    let store = golden_store();
    let (app, _) = app_with(store.path());
    let once = whatif(&app, json!({ "circuit": "toy_class0", "groups": [2], "image_id": 3 })).await;
    let twice = whatif(&app, json!({ "circuit": "toy_class0", "groups": [2, 2], "image_id": 3 })).await;
    let again = whatif(&app, json!({ "circuit": "toy_class0", "groups": [2], "image_id": 3 })).await;
    assert_eq!(once.0, StatusCode::OK);
    assert_eq!(once.1, twice.1);
    assert_eq!(once.1, again.1);
    let r: WhatIfResponse = serde_json::from_slice(&once.1).unwrap();
    assert_eq!(r.groups, [2]);
    assert!(r.logit_drop != 0.0);
}

#[tokio::test]
async fn whatif_logit_drop_matches_ranking() {
    let store = golden_store();
    let (app, state) = app_with(store.path());
    let g = golden();
    let graph = toy_model();
    let images: Vec<(u64, neurflow::Tensor)> = (0..6u32)
        .map(|i| (i as u64, model_input(&graph, &state.dataset_image(i).unwrap()).unwrap()))
        .collect();
    for group in g.groups.iter().map(|g| g.id) {
        let ranking = logit_drop_ranking(&graph, &g, group, &images, g.class, images.len()).unwrap();
        for drop in ranking {
            let (_, body) = whatif(&app, json!({ "circuit": "toy_class0", "groups": [group], "image_id": drop.image })).await;
            let r: WhatIfResponse = serde_json::from_slice(&body).unwrap();
            assert_eq!(r.logit_drop, drop.delta, "group {group} image {}", drop.image);
            assert_eq!(r.baseline.logits[g.class], drop.unmasked);
        }
    }
}

#[tokio::test]
async fn whatif_accepts_uploaded_images_and_patches() {
    let store = golden_store();
    let (app, state) = app_with(store.path());
    let upload = neurflow::patching::tensor_image(&state.dataset_image(1).unwrap());
    let by_upload = whatif(&app, json!({ "circuit": "toy_class0", "groups": [1], "image": png_b64(&upload) })).await;
    let by_id = whatif(&app, json!({ "circuit": "toy_class0", "groups": [1], "image_id": 1 })).await;
    assert_eq!(by_upload.0, StatusCode::OK);
    assert_eq!(by_upload.1, by_id.1, "8-bit PNG of a dataset image decodes to the same tensor");
    let pid = golden().groups[0].patches[0];
    let (status, _) = whatif(&app, json!({ "circuit": "toy_class0", "groups": [0], "patch_id": pid })).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn whatif_errors() {
    let store = golden_store();
    let (app, _) = app_with(store.path());
    let (s, b) = whatif(&app, json!({ "circuit": "toy_class0", "groups": [0, 42], "image_id": 0 })).await;
    assert_error(s, &b, StatusCode::UNPROCESSABLE_ENTITY, "unprocessable");
    assert_eq!(json_of(&b)["detail"]["group"], 42);
    let (s, b) = whatif(&app, json!({ "circuit": "toy_class0", "groups": [0], "image": "not base64!" })).await;
    assert_error(s, &b, StatusCode::BAD_REQUEST, "bad_request");
    let garbage = base64::engine::general_purpose::STANDARD.encode(b"definitely not an image");
    let (s, b) = whatif(&app, json!({ "circuit": "toy_class0", "groups": [0], "image": garbage })).await;
    assert_error(s, &b, StatusCode::BAD_REQUEST, "bad_request");
    let (s, b) = whatif(&app, json!({ "circuit": "toy_class0", "groups": [0] })).await;
    assert_error(s, &b, StatusCode::UNPROCESSABLE_ENTITY, "unprocessable");
    let (s, b) = whatif(&app, json!({ "circuit": "gone", "groups": [], "image_id": 0 })).await;
    assert_error(s, &b, StatusCode::NOT_FOUND, "not_found");
    let (s, b) = whatif(&app, json!({ "circuit": "toy_class0", "image_id": 100000 })).await;
    assert_error(s, &b, StatusCode::NOT_FOUND, "not_found");
    let resp = app
        .clone()
        .oneshot(Request::post("/whatif").body(Body::from("{not json")).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
}

async fn debug(app: &Router, body: Value) -> (StatusCode, Vec<u8>) {
    call(app, "POST", "/debug", Some(body)).await
}

#[tokio::test]
async fn debug_crops_follow_the_patch_layout() {
    let store = golden_store();
    let (app, state) = app_with(store.path());
    let img = state.dataset_image(0).unwrap();
    let (s, b) = debug(&app, json!({ "circuit": "toy_class0", "tap": "relu2", "image_id": 0 })).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&b));
    let report: DebugReport = serde_json::from_slice(&b).unwrap();
    let g = golden();
    let want: Vec<(f64, neurflow::patching::Rect)> =
        crop_rects(img.shape()[2] as u32, img.shape()[1] as u32, &g.config.patches);
    let got: Vec<(f64, neurflow::patching::Rect)> = report.crops.iter().map(|c| (c.scale, c.rect)).collect();
    assert_eq!(got, want);
    for c in &report.crops {
        assert_eq!(c.id, patch_id(0, c.scale, c.rect));
        assert_eq!(c.scores.len(), 1, "toy circuits hold one group per level");
        assert!(c.scores.iter().all(|s| (0.0..=1.0).contains(&s.value)));
        assert!(c.flagged.is_empty());
    }
    assert_eq!(report.groups, [1]);
}

#[tokio::test]
async fn debug_thresholds_flag_all_or_nothing() {
    let store = golden_store();
    let (app, _) = app_with(store.path());
    let all = debug(&app, json!({ "circuit": "toy_class0", "tap": "relu3", "image_id": 2, "thresholds": { "2": -1.0 } })).await;
    let none = debug(&app, json!({ "circuit": "toy_class0", "tap": "relu3", "image_id": 2, "thresholds": { "2": 1.0 } })).await;
    let all: DebugReport = serde_json::from_slice(&all.1).unwrap();
    let none: DebugReport = serde_json::from_slice(&none.1).unwrap();
    assert!(all.crops.iter().all(|c| c.flagged == [2]));
    assert!(none.crops.iter().all(|c| c.flagged.is_empty()));
}

#[tokio::test]
async fn debug_blank_image_scores_near_zero() {
    let store = golden_store();
    let (app, _) = app_with(store.path());
    let blank = RgbImage::from_pixel(32, 32, Rgb([0, 0, 0]));
    let (s, b) = debug(&app, json!({ "circuit": "toy_class0", "tap": "relu1", "image": png_b64(&blank) })).await;
    assert_eq!(s, StatusCode::OK);
    let report: DebugReport = serde_json::from_slice(&b).unwrap();
    let worst = report
        .crops
        .iter()
        .flat_map(|c| c.scores.iter().map(|s| s.value))
        .fold(0.0, f64::max);
    assert!(worst < 0.05, "blank image scored {worst}");
}

#[tokio::test]
async fn debug_errors() {
    let store = golden_store();
    let (app, _) = app_with(store.path());
    let (s, b) = debug(&app, json!({ "circuit": "toy_class0", "image_id": 0 })).await;
    assert_error(s, &b, StatusCode::UNPROCESSABLE_ENTITY, "unprocessable");
    let (s, b) = debug(&app, json!({ "circuit": "toy_class0", "tap": "conv9", "image_id": 0 })).await;
    assert_error(s, &b, StatusCode::UNPROCESSABLE_ENTITY, "unprocessable");
    let (s, b) = debug(&app, json!({ "circuit": "toy_class0", "tap": "relu1", "image_id": 0, "thresholds": { "9": 0.5 } })).await;
    assert_error(s, &b, StatusCode::UNPROCESSABLE_ENTITY, "unprocessable");
}

#[tokio::test]
async fn patches_are_served_at_input_resolution() {
    let store = golden_store();
    let (app, state) = app_with(store.path());
    let id = golden().groups[1].patches[0];
    let (s, first) = call(&app, "GET", &format!("/patches/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    let (_, second) = call(&app, "GET", &format!("/patches/{id}"), None).await;
    assert_eq!(first, second);
    let img = image::load_from_memory(&first).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (32, 32));
    assert_eq!(img, neurflow::patching::tensor_image(&state.patch(id).unwrap()));

    let data = neurflow::patching::class_dataset(&toy_model(), &probe_dir(), 0, &golden().config.patches).unwrap();
    let patch = data.get(id).unwrap();
    assert_eq!(state.patch(id).unwrap(), patch.pixels);
}

#[tokio::test]
async fn unknown_patches_are_404() {
    let store = golden_store();
    let (app, _) = app_with(store.path());
    for uri in ["/patches/1", "/patches/99999999999999", "/patches/abc"] {
        let (s, b) = call(&app, "GET", uri, None).await;
        assert_error(s, &b, StatusCode::NOT_FOUND, "not_found");
    }
}

#[tokio::test]
async fn ui_and_unknown_routes() {
    let store = golden_store();
    let (app, _) = app_with(store.path());
    let (s, b) = call(&app, "GET", "/ui", None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(String::from_utf8(b).unwrap().contains("/whatif"));
    let (s, b) = call(&app, "GET", "/nowhere", None).await;
    assert_error(s, &b, StatusCode::NOT_FOUND, "not_found");

    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<h1>explorer</h1>").unwrap();
    let mut cfg = ServiceConfig::new(store.path(), fixtures().join("toy/model.toml"), probe_dir());
    cfg.ui = Some(ui.path().to_path_buf());
    let app = router(Arc::new(SessionState::load(&cfg).unwrap()));
    let (s, b) = call(&app, "GET", "/ui/index.html", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(b, b"<h1>explorer</h1>");
}

#[tokio::test]
async fn read_endpoints_do_not_touch_the_store() {
    let store = golden_store();
    let path = store.path().join("toy_class0.circuit.json");
    let before = std::fs::read(&path).unwrap();
    let (app, _) = app_with(store.path());
    for uri in ["/circuits", "/circuits/toy_class0"] {
        call(&app, "GET", uri, None).await;
    }
    whatif(&app, json!({ "circuit": "toy_class0", "groups": [0], "image_id": 0 })).await;
    assert_eq!(std::fs::read(&path).unwrap(), before);
    let listing: BTreeMap<_, _> = std::fs::read_dir(store.path())
        .unwrap()
        .map(|e| (e.unwrap().file_name(), ()))
        .collect();
    assert_eq!(listing.len(), 1);
}

#[test]
fn corrupt_store_files_fail_startup() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = golden().to_json();
    text = text.replacen("\"class\": 0", "\"class\": 5", 1);
    std::fs::write(dir.path().join("bad.circuit.json"), text).unwrap();
    let cfg = ServiceConfig::new(dir.path(), fixtures().join("toy/model.toml"), probe_dir());
    assert!(SessionState::load(&cfg).is_err());
}
