use std::path::Path;
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use protomail_cli::service::{router, AppState, PredictRequest};
use protomail_core::corpus::load_generic_corpus_file;
use protomail_core::edits::SuggestOptions;
use protomail_core::explain::explain;
use protomail_core::model::{ModelConfig, ProtoModel};
use protomail_core::parsing::load_parses;
use protomail_core::protonet::Granularity;

fn fixtures() -> &'static Path {
    static P: OnceLock<std::path::PathBuf> = OnceLock::new();
    P.get_or_init(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden"))
}

fn state() -> Arc<AppState> {
    static S: OnceLock<Arc<AppState>> = OnceLock::new();
    S.get_or_init(|| {
        let model = ProtoModel::load(&fixtures().join("checkpoint")).unwrap();
        Arc::new(AppState::new(model, SuggestOptions::default(), 3))
    })
    .clone()
}

async fn call(app: Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, Body::from))
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

fn as_json(b: &[u8]) -> Value {
    serde_json::from_slice(b).unwrap()
}

/// A corpus email as a request, with its gold parse block.
fn corpus_request(id: &str) -> PredictRequest {
    let (emails, _) = load_generic_corpus_file(&fixtures().join("corpus.jsonl")).unwrap();
    let e = emails.into_iter().find(|e| e.id() == id).unwrap().email;
    let (parses, _) = load_parses(&std::fs::read_to_string(fixtures().join("parses.conllu")).unwrap(), None);
    let mut block = String::new();
    for ((eid, slot), g) in &parses {
        if eid == id {
            g.write_conll(eid, *slot, &mut block);
        }
    }
    PredictRequest {
        subject: e.subject,
        body: e.body,
        recipient_org: e.recipient_org,
        interests: Some(e.interests.as_slice().to_vec()),
        parses: Some(block),
    }
}

fn body(req: &PredictRequest) -> Option<String> {
    Some(serde_json::to_string(req).unwrap())
}

#[tokio::test]
async fn health_reports_the_model_version() {
    let s = state();
    let (status, b) = call(router(s.clone()), "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    let v = as_json(&b);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["model_version"], s.model_version.as_str());
}

#[tokio::test]
async fn predict_flags_the_structural_view() {
    let plain = PredictRequest {
        subject: "Weekly digest".into(),
        body: "Hi Ann. Claim your exclusive discount today. Thanks.".into(),
        ..Default::default()
    };
    let (status, b) = call(router(state()), "POST", "/predict", body(&plain)).await;
    assert_eq!(status, StatusCode::OK);
    let v = as_json(&b);
    let p = v["probability"].as_f64().unwrap();
    assert!(p > 0.0 && p < 1.0);
    assert_eq!(v["structural_view"], "degraded");
    let parsed = corpus_request("syn-000");
    let (_, b) = call(router(state()), "POST", "/predict", body(&parsed)).await;
    assert_eq!(as_json(&b)["structural_view"], "full");
}

#[tokio::test]
async fn malformed_requests_get_field_diagnostics() {
    let (status, b) = call(router(state()), "POST", "/predict", Some("{\"subject\": 3}".into())).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(as_json(&b)["diagnostics"].is_array());
    let (status, b) = call(
        router(state()),
        "POST",
        "/predict",
        Some(json!({"subject": "", "body": "", "extra": 1}).to_string()),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(as_json(&b)["diagnostics"][0]["field"], "extra");
    let (status, b) = call(router(state()), "POST", "/predict", Some(json!({"subject": " ", "body": ""}).to_string())).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(as_json(&b)["diagnostics"][0]["field"], "body");
    let (status, _) = call(
        router(state()),
        "POST",
        "/suggest?position=signature",
        body(&corpus_request("syn-000")),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn prototype_source_email_hits_the_zero_distance_score() {
    let s = state();
    let bank = s.model.banks.get(Granularity::Document).unwrap();
    let source = bank.projection.as_ref().unwrap()[0].email_id.clone();
    let (status, b) = call(router(s.clone()), "POST", "/explain?topN=1", body(&corpus_request(&source))).await;
    assert_eq!(status, StatusCode::OK);
    let v = as_json(&b);
    let top = &v["report"]["prototypes"]["D"][0];
    assert!((top["similarity"].as_f64().unwrap() - 1e4f64.ln()).abs() < 1e-9, "{top}");
    assert_eq!(v["report"]["prototypes"]["D"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn explain_endpoint_equals_offline_explain() {
    let s = state();
    let req = corpus_request("syn-007");
    let (_, b) = call(router(s.clone()), "POST", "/explain?topN=3", body(&req)).await;
    let served: Value = as_json(&b)["report"].clone();
    let p = protomail_cli::service::prepare_request(&s.model, &req).unwrap();
    let offline = serde_json::to_value(explain(&s.model, &p, 3).unwrap()).unwrap();
    assert_eq!(served, offline);
}

#[tokio::test]
async fn suggest_returns_versioned_suggestions() {
    let req = PredictRequest {
        subject: "Weekly digest".into(),
        body: "Hi Ann. Register for your free pass. Best regards.".into(),
        ..Default::default()
    };
    let (status, b) = call(router(state()), "POST", "/suggest?position=main", body(&req)).await;
    assert_eq!(status, StatusCode::OK);
    let v = as_json(&b);
    assert_eq!(v["text_version"], protomail_cli::service::text_version(&req.subject, &req.body));
    for s in v["suggestions"].as_array().unwrap() {
        assert_eq!(s["position"], "main");
        assert_ne!(s["original"]["text"], s["replacement"]);
    }
}

#[tokio::test]
async fn prototypes_endpoint_needs_projection() {
    let (status, b) = call(router(state()), "GET", "/prototypes", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(as_json(&b)["prototypes"].as_array().unwrap().len(), 12);
    let cfg = state().model.config.clone();
    let fresh = ProtoModel::new(ModelConfig { ..cfg }).unwrap();
    let app = router(Arc::new(AppState::new(fresh, SuggestOptions::default(), 3)));
    let (status, b) = call(app.clone(), "GET", "/prototypes", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert!(as_json(&b)["hint"].is_string());
    let (status, _) = call(app, "POST", "/explain", body(&corpus_request("syn-000"))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_predictions_match_sequential_ones() {
    let s = state();
    let requests: Vec<PredictRequest> = (0..50).map(|i| corpus_request(&format!("syn-{:03}", i % 10))).collect();
    let mut sequential = Vec::new();
    for r in &requests {
        sequential.push(call(router(s.clone()), "POST", "/predict", body(r)).await);
    }
    let handles: Vec<_> = requests
        .iter()
        .map(|r| tokio::spawn(call(router(s.clone()), "POST", "/predict", body(r))))
        .collect();
    for (h, seq) in handles.into_iter().zip(sequential) {
        let got = h.await.unwrap();
        assert_eq!(got.0, StatusCode::OK);
        assert_eq!(got, seq);
    }
}

#[test]
fn request_parse_blocks_are_rekeyed() {
    let req = corpus_request("syn-003");
    let s = state();
    let p = protomail_cli::service::prepare_request(&s.model, &req).unwrap();
    assert!(!p.degraded);
    assert!(p.subject.is_some());
}
