use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use cdti_core::scm::{OutcomeScm, StandInConfig, StandInScm};
use cdti_session::{router, Service};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn upload_body() -> Value {
    let ds = StandInScm::new(StandInConfig::default(), 0).simulate(300, 4).unwrap();
    json!({ "csv": String::from_utf8(ds.csv_bytes().unwrap()).unwrap(), "roles": ds.roles() })
}

#[tokio::test]
async fn full_flow_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(Arc::new(Service::open(dir.path()).unwrap()));
    let (st, v) = call(&app, "GET", "/healthz", None).await;
    assert_eq!((st, v["status"].as_str()), (StatusCode::OK, Some("ok")));

    let (st, v) = call(&app, "POST", "/datasets", Some(upload_body())).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    let dataset_id = v["dataset_id"].as_str().unwrap().to_string();

    let (st, v) = call(&app, "POST", "/sessions", Some(json!({ "dataset_id": dataset_id, "strategy": "z_dom", "budget": 3 }))).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    let sid = v["session_id"].as_str().unwrap().to_string();
    assert_eq!(v["proposals"], 3);

    for k in 0..3 {
        let (st, p) = call(&app, "GET", &format!("/sessions/{sid}/next"), None).await;
        assert_eq!(st, StatusCode::OK);
        assert_eq!(p["pair_id"], k);
        let (st, again) = call(&app, "GET", &format!("/sessions/{sid}/next"), None).await;
        assert_eq!((st, &again), (StatusCode::OK, &p));
        let body = json!({ "pair_id": k, "explanations": [{ "name": "Fever", "origin": "free_text" }], "annotator_id": "a" });
        let (st, ack) = call(&app, "POST", &format!("/sessions/{sid}/annotations"), Some(body.clone())).await;
        assert_eq!(st, StatusCode::OK, "{ack}");
        assert_eq!(ack["cursor"], k + 1);
        let (st, err) = call(&app, "POST", &format!("/sessions/{sid}/annotations"), Some(body)).await;
        assert_eq!(st, StatusCode::CONFLICT);
        assert_eq!(err["code"], "StalePair");
    }
    let (st, err) = call(&app, "GET", &format!("/sessions/{sid}/next"), None).await;
    assert_eq!((st, err["code"].as_str()), (StatusCode::GONE, Some("Exhausted")));
    let (st, r) = call(&app, "GET", &format!("/sessions/{sid}/report"), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(r["concepts"], json!([{ "name": "fever", "count": 3.0 }]));
    assert_eq!(r["session"]["status"], "exhausted");
}

#[tokio::test]
async fn errors_are_json() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(Arc::new(Service::open(dir.path()).unwrap()));
    let (st, v) = call(&app, "GET", "/sessions/nope/next", None).await;
    assert_eq!((st, v["code"].as_str()), (StatusCode::NOT_FOUND, Some("NotFound")));
    assert!(v["message"].as_str().unwrap().contains("nope"));
    let (st, v) = call(&app, "POST", "/sessions", Some(json!({ "dataset_id": "x" }))).await;
    assert_eq!((st, v["code"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("ValidationError")));
    let (st, v) = call(&app, "POST", "/sessions", Some(json!({ "dataset_id": "x", "strategy": "z_match", "budget": 2 }))).await;
    assert_eq!((st, v["code"].as_str()), (StatusCode::NOT_FOUND, Some("NotFound")));
    let (st, v) = call(&app, "POST", "/datasets", Some(json!({ "csv": "a,b\n1,2\n", "roles": { "treatment": "t", "outcome": "y", "covariates": ["a"] } }))).await;
    assert_eq!((st, v["code"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("ValidationError")));
    let (st, v) = call(&app, "GET", "/nowhere", None).await;
    assert_eq!((st, v["code"].as_str()), (StatusCode::NOT_FOUND, Some("NotFound")));
}
