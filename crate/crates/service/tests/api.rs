use std::sync::Arc;
use std::time::Duration;

use alsvm_core::active::{run, AlSettings, SimulatedOracle, Strategy};
use alsvm_core::dataset::{libsvm_string, Dataset};
use alsvm_core::stopping::StopConfig;
use alsvm_core::synth::{generate_synthetic, SynthConfig};
use alsvm_service::{router, AppState, ServiceConfig};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn pool(n: usize, seed: u64) -> Dataset {
    generate_synthetic(&SynthConfig {
        n,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn app(config: ServiceConfig) -> Router {
    router(Arc::new(AppState::open(config).unwrap()))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => builder
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

async fn raw(app: &Router, method: &str, uri: &str, body: &str) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn wait_idle(app: &Router, id: &str) -> Value {
    for _ in 0..10_000 {
        let (status, body) = call(app, "GET", &format!("/sessions/{id}/status"), None).await;
        assert_eq!(status, StatusCode::OK);
        if body["lifecycle"] != "training" {
            return body;
        }
        tokio::time::sleep(Duration::from_millis(2)).await;
    }
    panic!("session {id} never finished training");
}

fn settings(seed: u64) -> AlSettings {
    AlSettings {
        init_size: Some(30),
        batch_size: Some(20),
        seed: Some(seed),
        max_iterations: Some(6),
        halt_on_stop: Some(false),
        ..AlSettings::default()
    }
}

async fn create(app: &Router, ds: &Dataset, al: &AlSettings, stop: &StopConfig) -> (String, Value) {
    let (status, body) = call(
        app,
        "POST",
        "/sessions",
        Some(json!({ "dataset": libsvm_string(ds), "al": al, "stop": stop })),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    (body["session_id"].as_str().unwrap().to_string(), body)
}

/// Answers every pending item with its gold label; returns false once
/// nothing is pending.
async fn answer_batch(app: &Router, id: &str, ds: &Dataset) -> bool {
    let (_, batch) = call(app, "GET", &format!("/sessions/{id}/batch"), None).await;
    let pending: Vec<usize> = serde_json::from_value(batch["pending"].clone()).unwrap();
    if pending.is_empty() {
        return false;
    }
    let labels: Vec<Value> = pending
        .iter()
        .map(|&i| json!({ "index": i, "label": ds.get(i).label }))
        .collect();
    let (status, body) = call(app, "POST", &format!("/sessions/{id}/labels"), Some(json!({ "labels": labels }))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    wait_idle(app, id).await;
    true
}

#[tokio::test]
async fn create_returns_initial_batch() {
    let app = app(ServiceConfig::default());
    let ds = pool(300, 1);
    let al = AlSettings {
        init_size: Some(50),
        ..AlSettings::default()
    };
    let (id, body) = create(&app, &ds, &al, &StopConfig::default()).await;
    assert_eq!(body["pending"].as_array().unwrap().len(), 50);
    assert_eq!(body["items"].as_array().unwrap().len(), 50);
    assert_eq!(body["lifecycle"], "awaiting_labels");
    let item = &body["items"][0];
    assert!(item["index"].is_u64());
    assert!(item["text"].as_str().unwrap().contains(':'));
    assert!(item["abs_decision_value"].is_null());

    let (other, _) = create(&app, &ds, &al, &StopConfig::default()).await;
    assert_ne!(id, other);

    let (_, status) = call(&app, "GET", &format!("/sessions/{id}/status"), None).await;
    assert_eq!(status["labeled_count"], 0);
    assert_eq!(status["pool_size"], 300);
    assert!(status["pa"].is_null());
    assert!(status["stopped_at"].is_null());
    assert_eq!(status["agreements"], json!([]));
}

#[tokio::test]
async fn display_texts_are_shown() {
    let app = app(ServiceConfig::default());
    let ds = pool(60, 2);
    let texts: Vec<String> = (0..60).map(|i| format!("sentence {i}")).collect();
    let (status, body) = call(
        &app,
        "POST",
        "/sessions",
        Some(json!({ "dataset": libsvm_string(&ds), "texts": texts, "al": { "init_size": 5 } })),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    for item in body["items"].as_array().unwrap() {
        assert_eq!(item["text"], format!("sentence {}", item["index"]));
    }
}

#[tokio::test]
async fn bad_uploads_are_rejected() {
    let app = app(ServiceConfig::default());
    let (status, body) = call(&app, "POST", "/sessions", Some(json!({ "dataset": "" }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].is_string() && body["detail"].is_string());

    let (status, body) = call(&app, "POST", "/sessions", Some(json!({ "dataset": "+1 1:1\n-1 x:y\n" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["detail"].as_str().unwrap().contains('2'), "{body}");

    let (status, _) = raw(&app, "POST", "/sessions", "{not json").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, _) = call(&app, "POST", "/sessions", Some(json!({ "dataset": "+1 1:1\n", "bogus": 1 }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (status, _) = call(
        &app,
        "POST",
        "/sessions",
        Some(json!({ "dataset": "+1 1:1\n-1 2:1\n", "al": { "init_size": 5 } })),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (status, _) = call(
        &app,
        "POST",
        "/sessions",
        Some(json!({ "dataset": "+1 1:1\n-1 2:1\n", "texts": ["one"] })),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn unknown_session_is_404() {
    let app = app(ServiceConfig::default());
    for path in ["batch", "status", "export"] {
        let (status, body) = call(&app, "GET", &format!("/sessions/nope/{path}"), None).await;
        assert_eq!(status, StatusCode::NOT_FOUND);
        assert_eq!(body["error"], "not_found");
    }
    let (status, _) = call(
        &app,
        "POST",
        "/sessions/nope/labels",
        Some(json!({ "labels": [{ "index": 0, "label": 1 }] })),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn submission_rules() {
    let app = app(ServiceConfig::default());
    let ds = pool(200, 3);
    let (id, body) = create(&app, &ds, &settings(0), &StopConfig::default()).await;
    let pending: Vec<usize> = serde_json::from_value(body["pending"].clone()).unwrap();
    let url = format!("/sessions/{id}/labels");
    let entry = |i: usize| json!({ "index": i, "label": ds.get(i).label });

    let (status, _) = call(&app, "POST", &url, Some(json!({ "labels": [] }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(&app, "POST", &url, Some(json!({ "labels": [{ "index": pending[0], "label": 0 }] }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(&app, "POST", &url, Some(json!({ "labels": [entry(pending[0]), entry(pending[0])] }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(&app, "POST", &url, Some(json!({ "labels": [{ "index": 5000, "label": 1 }] }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let outside = (0..200).find(|i| !pending.contains(i)).unwrap();
    let (status, body) = call(&app, "POST", &url, Some(json!({ "labels": [entry(outside)] }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "conflict");

    let first: Vec<Value> = pending[..10].iter().map(|&i| entry(i)).collect();
    let (status, body) = call(&app, "POST", &url, Some(json!({ "labels": first }))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["accepted"], 10);
    assert_eq!(body["pending"].as_array().unwrap().len(), 20);
    assert_eq!(body["labeled_count"], 10);
    assert_eq!(body["lifecycle"], "awaiting_labels");

    let mut reordered = first.clone();
    reordered.reverse();
    let (status, body) = call(&app, "POST", &url, Some(json!({ "labels": reordered }))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["duplicate"], true);
    assert_eq!(body["labeled_count"], 10);

    let (status, _) = call(&app, "POST", &url, Some(json!({ "labels": [entry(pending[0]), entry(pending[10])] }))).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (_, batch) = call(&app, "GET", &format!("/sessions/{id}/batch"), None).await;
    assert_eq!(batch["pending"], json!(pending[10..]));

    let (_, export) = call(&app, "GET", &format!("/sessions/{id}/export"), None).await;
    assert_eq!(export["libsvm"].as_str().unwrap().lines().count(), 10);
    assert!(export["model"].is_null());
}

#[tokio::test]
async fn export_before_labels_is_empty() {
    let app = app(ServiceConfig::default());
    let ds = pool(100, 4);
    let (id, _) = create(&app, &ds, &settings(0), &StopConfig::default()).await;
    let (status, export) = call(&app, "GET", &format!("/sessions/{id}/export"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(export["libsvm"], "");
    assert!(export["model"].is_null());
    assert_eq!(export["trace"], "");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn scripted_client_reproduces_simulated_run() {
    let app = app(ServiceConfig::default());
    let ds = pool(400, 5);
    let al = settings(9);
    let stop = StopConfig {
        seed: 9,
        ..StopConfig::default()
    };
    let (id, _) = create(&app, &ds, &al, &stop).await;
    let mut batches = 0;
    while answer_batch(&app, &id, &ds).await {
        batches += 1;
    }
    assert_eq!(batches, 7);

    let status = wait_idle(&app, &id).await;
    assert_eq!(status["lifecycle"], "completed");
    assert_eq!(status["labeled_count"], 30 + 6 * 20);

    let expected = run(
        &ds,
        &al.resolve(ds.len()),
        &stop,
        &mut SimulatedOracle::new(&ds),
        Strategy::ClosestInitPa,
    )
    .unwrap();
    let (_, export) = call(&app, "GET", &format!("/sessions/{id}/export"), None).await;
    assert_eq!(export["trace"].as_str().unwrap(), expected.to_jsonl());
    assert_eq!(export["libsvm"].as_str().unwrap().lines().count(), 150);
    assert!(export["model"].as_str().unwrap().starts_with("linear_svm"));

    let pa = expected.pa.unwrap().pa;
    assert_eq!(status["pa"].as_f64().unwrap(), pa);

    let (_, again) = call(&app, "GET", &format!("/sessions/{id}/export"), None).await;
    assert_eq!(serde_json::to_vec(&export).unwrap(), serde_json::to_vec(&again).unwrap());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn stopped_session_offers_no_batch() {
    let app = app(ServiceConfig::default());
    let ds = pool(400, 6);
    let al = AlSettings {
        init_size: Some(30),
        batch_size: Some(10),
        ..AlSettings::default()
    };
    let stop = StopConfig {
        agreement_threshold: 0.5,
        window: 2,
        ..StopConfig::default()
    };
    let (id, _) = create(&app, &ds, &al, &stop).await;
    let mut pa = None;
    while answer_batch(&app, &id, &ds).await {
        let (_, status) = call(&app, "GET", &format!("/sessions/{id}/status"), None).await;
        if let Some(p) = pa {
            assert_eq!(status["pa"], p);
        }
        pa = Some(status["pa"].clone());
    }
    let status = wait_idle(&app, &id).await;
    assert_eq!(status["lifecycle"], "stopped", "{status}");
    let stopped_at = status["stopped_at"].as_u64().unwrap();
    assert_eq!(status["models"].as_u64().unwrap(), stopped_at + 1);
    let agreements = status["agreements"].as_array().unwrap();
    assert_eq!(agreements.len(), 2);
    assert!(agreements.iter().all(|a| a.as_f64().unwrap() >= 0.5));

    let (_, batch) = call(&app, "GET", &format!("/sessions/{id}/batch"), None).await;
    assert_eq!(batch["stopped"], true);
    assert_eq!(batch["items"], json!([]));
    let (status, _) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/labels"),
        Some(json!({ "labels": [{ "index": 0, "label": 1 }] })),
    )
    .await;
    assert!(status == StatusCode::CONFLICT || status == StatusCode::OK);
    let (status, _) = call(&app, "GET", &format!("/sessions/{id}/export"), None).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn selection_context_is_reported() {
    let app = app(ServiceConfig::default());
    let ds = pool(200, 8);
    let (id, _) = create(&app, &ds, &settings(1), &StopConfig::default()).await;
    assert!(answer_batch(&app, &id, &ds).await);
    let (_, batch) = call(&app, "GET", &format!("/sessions/{id}/batch"), None).await;
    let items = batch["items"].as_array().unwrap();
    assert_eq!(items.len(), 20);
    let margins: Vec<f64> = items.iter().map(|x| x["abs_decision_value"].as_f64().unwrap()).collect();
    assert!(margins.windows(2).all(|w| w[0] <= w[1]));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn sessions_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig::new(Some(dir.path().to_path_buf()));
    let ds = pool(300, 7);
    let al = settings(3);
    let stop = StopConfig::default();

    let first = app(config.clone());
    let (id, _) = create(&first, &ds, &al, &stop).await;
    assert!(answer_batch(&first, &id, &ds).await);
    assert!(answer_batch(&first, &id, &ds).await);
    let (_, batch) = call(&first, "GET", &format!("/sessions/{id}/batch"), None).await;
    let pending: Vec<usize> = serde_json::from_value(batch["pending"].clone()).unwrap();
    let partial: Vec<Value> = pending[..5]
        .iter()
        .map(|&i| json!({ "index": i, "label": ds.get(i).label }))
        .collect();
    let (status, _) = call(&first, "POST", &format!("/sessions/{id}/labels"), Some(json!({ "labels": partial }))).await;
    assert_eq!(status, StatusCode::OK);
    let before = wait_idle(&first, &id).await;
    let (_, export_before) = call(&first, "GET", &format!("/sessions/{id}/export"), None).await;
    drop(first);

    let second = app(config.clone());
    let after = wait_idle(&second, &id).await;
    assert_eq!(before, after);
    let (_, export_after) = call(&second, "GET", &format!("/sessions/{id}/export"), None).await;
    assert_eq!(export_before, export_after);
    let (_, batch) = call(&second, "GET", &format!("/sessions/{id}/batch"), None).await;
    assert_eq!(batch["pending"], json!(pending[5..]));

    while answer_batch(&second, &id, &ds).await {}
    drop(second);

    let third = app(config);
    let (_, export) = call(&third, "GET", &format!("/sessions/{id}/export"), None).await;
    let expected = run(
        &ds,
        &al.resolve(ds.len()),
        &stop,
        &mut SimulatedOracle::new(&ds),
        Strategy::ClosestInitPa,
    )
    .unwrap();
    assert_eq!(export["trace"].as_str().unwrap(), expected.to_jsonl());
    let (_, health) = call(&third, "GET", "/health", None).await;
    assert_eq!(health["sessions"], 1);
}

#[tokio::test]
async fn health_and_static_assets() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>ui</html>").unwrap();
    let app = app(ServiceConfig {
        ui_dir: Some(dir.path().to_path_buf()),
        ..ServiceConfig::default()
    });
    let (status, health) = call(&app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(health["status"], "ok");
    assert_eq!(health["sessions"], 0);
    let (status, body) = call(&app, "GET", "/index.html", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, Value::String("<html>ui</html>".into()));
}
