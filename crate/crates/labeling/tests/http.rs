use std::sync::Arc;
use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use statechef::dataset::SyntheticImageSource;
use statechef::manifest::{DatasetManifest, SampleRecord, Source};
use statechef::model::{build_model, ModelSpec};
use statechef::taxonomy::{Taxonomy, CLASS_NAMES};
use statechef_labeling::{router, AppState, PredictorEngine, ProposalStore};
use tower::ServiceExt;

fn app(dir: &std::path::Path) -> Router {
    let store = ProposalStore::open(dir, Taxonomy::canonical()).unwrap();
    let engine = PredictorEngine {
        predictor: build_model(ModelSpec::tiny(11, 4)).unwrap(),
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        source: Box::new(SyntheticImageSource::default()),
        size: (16, 16),
        model_ref: "tiny".into(),
    };
    router(AppState::new(
        store,
        Arc::new(engine),
        Arc::new(SyntheticImageSource::default()),
        (16, 16),
    ))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, to_bytes(res.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

fn records(n: usize) -> Vec<SampleRecord> {
    (0..n)
        .map(|i| {
            SampleRecord::new(
                format!("r{i}"),
                format!("r{i}.png"),
                "bread",
                CLASS_NAMES[i % 11],
                Source::Imagenet,
            )
        })
        .collect()
}

async fn wait_for_job(app: &Router, job: &str) -> Value {
    for _ in 0..200 {
        let (status, body) = call_json(app, "GET", &format!("/jobs/{job}"), None).await;
        assert_eq!(status, StatusCode::OK);
        if body["state"] != "running" {
            return body;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    panic!("job {job} did not finish");
}

#[tokio::test(flavor = "multi_thread")]
async fn review_workflow_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());

    let (status, body) = call_json(
        &app,
        "POST",
        "/proposals",
        Some(json!({ "records": records(5), "k": 3 })),
    )
    .await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let job = wait_for_job(&app, body["job_id"].as_str().unwrap()).await;
    assert_eq!(job["state"], "done");
    assert_eq!(job["proposed"], 5);

    let (status, session) = call_json(&app, "POST", "/sessions", Some(json!({ "reviewer": "ana" }))).await;
    assert_eq!(status, StatusCode::CREATED);
    let sid = session["session_id"].as_str().unwrap().to_string();
    assert_eq!(session["version"], 0);

    let mut version = 0;
    let mut decided = Vec::new();
    for kind in ["accept", "discard", "accept", "override", "discard"] {
        let (status, next) = call_json(&app, "GET", &format!("/sessions/{sid}/next"), None).await;
        assert_eq!(status, StatusCode::OK);
        let pid = next["proposal_id"].as_str().unwrap().to_string();
        let probs: Vec<f64> = next["proposed"]
            .as_array()
            .unwrap()
            .iter()
            .map(|s| s["probability"].as_f64().unwrap())
            .collect();
        assert_eq!(probs.len(), 3);
        assert!(probs.windows(2).all(|w| w[0] >= w[1]));
        let decision = if kind == "override" {
            json!({ "kind": "override", "state": next["proposed"][1]["state"] })
        } else {
            json!({ "kind": kind })
        };
        let (status, out) = call_json(
            &app,
            "POST",
            &format!("/sessions/{sid}/decisions"),
            Some(json!({ "proposal_id": pid, "decision": decision, "expected_version": version })),
        )
        .await;
        assert_eq!(status, StatusCode::OK, "{out}");
        version += 1;
        assert_eq!(out["session"]["version"], version);
        decided.push((pid, kind));
    }
    let (status, _) = call(&app, "GET", &format!("/sessions/{sid}/next"), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);

    let (status, audit) = call_json(&app, "GET", &format!("/sessions/{sid}/audit"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(audit.as_array().unwrap().len() as u64, version);

    let (status, view) = call_json(&app, "GET", &format!("/sessions/{sid}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(view["counts"]["accepted"], 2);
    assert_eq!(view["counts"]["overridden"], 1);
    assert_eq!(view["counts"]["discarded"], 2);

    let (status, bytes) = call(&app, "GET", "/export?status=accepted", None).await;
    assert_eq!(status, StatusCode::OK);
    let accepted = DatasetManifest::from_jsonl(std::str::from_utf8(&bytes).unwrap()).unwrap();
    let expect: Vec<&str> = decided
        .iter()
        .filter(|(_, k)| *k == "accept")
        .map(|(p, _)| p.as_str())
        .collect();
    assert_eq!(
        accepted.records.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(),
        expect
    );

    let (_, bytes) = call(&app, "GET", "/export", None).await;
    let all = DatasetManifest::from_jsonl(std::str::from_utf8(&bytes).unwrap()).unwrap();
    assert_eq!(all.records.len(), 3);
    let (status, _) = call(&app, "GET", "/export?status=pending", None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test(flavor = "multi_thread")]
async fn stale_version_is_a_retryable_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (_, body) = call_json(&app, "POST", "/proposals", Some(json!({ "records": records(2) }))).await;
    wait_for_job(&app, body["job_id"].as_str().unwrap()).await;
    let (_, a) = call_json(&app, "POST", "/sessions", Some(json!({ "reviewer": "a" }))).await;
    let sid = a["session_id"].as_str().unwrap();
    let decide =
        |pid: &str, v: u64| json!({ "proposal_id": pid, "decision": { "kind": "accept" }, "expected_version": v });

    let (status, _) = call_json(
        &app,
        "POST",
        &format!("/sessions/{sid}/decisions"),
        Some(decide("r0", 0)),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let (status, err) = call_json(
        &app,
        "POST",
        &format!("/sessions/{sid}/decisions"),
        Some(decide("r1", 0)),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["retryable"], true);
    assert_eq!(err["actual_version"], 1);
    let (_, next) = call_json(&app, "GET", &format!("/sessions/{sid}/next"), None).await;
    assert_eq!(next["proposal_id"], "r1");
    assert_eq!(next["status"], "pending");

    let (status, _) = call_json(
        &app,
        "POST",
        &format!("/sessions/{sid}/decisions"),
        Some(decide("nope", 1)),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call_json(&app, "GET", "/sessions/missing/next", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn decisions_survive_a_service_restart() {
    let dir = tempfile::tempdir().unwrap();
    let sid;
    {
        let app = app(dir.path());
        let (_, body) = call_json(&app, "POST", "/proposals", Some(json!({ "records": records(3) }))).await;
        wait_for_job(&app, body["job_id"].as_str().unwrap()).await;
        let (_, s) = call_json(&app, "POST", "/sessions", Some(json!({ "reviewer": "a" }))).await;
        sid = s["session_id"].as_str().unwrap().to_string();
        let (status, _) = call_json(
            &app,
            "POST",
            &format!("/sessions/{sid}/decisions"),
            Some(json!({ "proposal_id": "r0", "decision": { "kind": "discard" }, "expected_version": 0 })),
        )
        .await;
        assert_eq!(status, StatusCode::OK);
    }
    let app = app(dir.path());
    let (_, view) = call_json(&app, "GET", &format!("/sessions/{sid}"), None).await;
    assert_eq!(view["version"], 1);
    assert_eq!(view["counts"]["discarded"], 1);
    assert_eq!(view["counts"]["pending"], 2);
}

#[tokio::test(flavor = "multi_thread")]
async fn manifest_reference_images_and_taxonomy() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let manifest = DatasetManifest {
        records: records(4),
        meta: Default::default(),
    };
    let path = dir.path().join("unlabeled.jsonl");
    manifest.save(&path).unwrap();
    let (status, body) = call_json(
        &app,
        "POST",
        "/proposals",
        Some(json!({ "manifest": path.display().to_string(), "k": 2 })),
    )
    .await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let job = wait_for_job(&app, body["job_id"].as_str().unwrap()).await;
    assert_eq!(job["submitted"], 4);
    assert_eq!(job["proposed"], 4);

    let (status, png) = call(&app, "GET", "/images/r2", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
    let (status, _) = call(&app, "GET", "/images/unknown", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, tax) = call_json(&app, "GET", "/taxonomy", None).await;
    assert_eq!(status, StatusCode::OK);
    let names: Vec<&str> = tax["classes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, CLASS_NAMES);

    let (status, _) = call_json(
        &app,
        "POST",
        "/proposals",
        Some(json!({ "records": records(1), "k": 0 })),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (_, body) = call_json(&app, "POST", "/proposals", Some(json!({ "manifest": "/no/such/file" }))).await;
    let job = wait_for_job(&app, body["job_id"].as_str().unwrap()).await;
    assert_eq!(job["state"], "failed");
}
