use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use metaction::scene_io::SceneFile;
use metaction::service::{router, AppState};
use metaction_core::kinematics::ActionGrid;
use metaction_core::labeler::{LabelThresholds, MetaAction};
use metaction_core::policy::{Policy, PolicyConfig};
use metaction_core::sim::{create_session, SimConfig, StepRecord};
use metaction_core::synth::{generate_scene, ScriptedManeuver};
use metaction_core::Scene;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};
use tower::ServiceExt;

fn scene() -> Scene {
    generate_scene(
        &[ScriptedManeuver::new(MetaAction::KeepLane), ScriptedManeuver::new(MetaAction::LeftLaneChange)],
        &ActionGrid::default(),
        &LabelThresholds::default(),
        3,
    )
    .unwrap()
    .scene
}

fn policy() -> Arc<Policy> {
    let mut p = Policy::new(PolicyConfig::micro(), 1).unwrap();
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let names: Vec<String> = p.params.iter().map(|(n, _)| n.clone()).filter(|n| n.contains("embed.")).collect();
    for n in names {
        for v in &mut p.params.get_mut(&n).unwrap().data {
            *v = r.gen_range(-1.0..1.0);
        }
    }
    Arc::new(p)
}

fn sim() -> SimConfig {
    SimConfig {
        grid: ActionGrid::new(3, 3.0, 3, 0.3).unwrap(),
        ..SimConfig::default()
    }
}

fn app() -> Router {
    router(AppState::new(policy(), sim(), 0))
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, Body::from))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn create(app: &Router, seed: u64) -> String {
    let body = json!({ "scene": SceneFile::from_scene(&scene()), "seed": seed });
    let (status, v) = call(app, Method::POST, "/v1/sessions", Some(body.to_string())).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

async fn step(app: &Router, id: &str, body: Option<Value>) -> (StatusCode, Value) {
    call(app, Method::POST, &format!("/v1/sessions/{id}/step"), body.map(|b| b.to_string())).await
}

#[tokio::test]
async fn lists_meta_actions() {
    let (status, v) = call(&app(), Method::GET, "/v1/meta-actions", None).await;
    assert_eq!(status, StatusCode::OK);
    let codes: Vec<&str> = v.as_array().unwrap().iter().map(|m| m["code"].as_str().unwrap()).collect();
    assert_eq!(codes, ["ST", "KL", "LLC", "RLC", "TL", "RT", "LU", "RU"]);
}

#[tokio::test]
async fn new_session_starts_at_frame_zero_with_warmup() {
    let app = app();
    let id = create(&app, 1).await;
    let (status, v) = call(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["current_frame"], 0);
    assert_eq!(v["horizon"], 80);
    for a in v["agents"].as_array().unwrap() {
        assert_eq!(a["states"].as_array().unwrap().len(), 10);
        assert_eq!(a["meta_actions"].as_array().unwrap().len(), 9);
    }
    assert!(v["last_record"].is_null());
    let (status, s) = call(&app, Method::GET, &format!("/v1/sessions/{id}/scene"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(s["agents"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn step_override_is_injected() {
    let app = app();
    let id = create(&app, 1).await;
    let (status, rec) = step(&app, &id, Some(json!({ "overrides": { "2": "LLC" } }))).await;
    assert_eq!(status, StatusCode::OK, "{rec}");
    assert_eq!(rec["agents"][1]["injected"], true);
    assert_eq!(rec["agents"][1]["meta_action"], "LLC");
    assert_eq!(rec["agents"][0]["injected"], false);
    let (_, rec) = step(&app, &id, None).await;
    assert_eq!(rec["agents"][1]["injected"], true);
}

#[tokio::test]
async fn override_endpoints_persist_until_released() {
    let app = app();
    let id = create(&app, 2).await;
    let uri = format!("/v1/sessions/{id}/overrides/1");
    let (status, v) = call(&app, Method::PUT, &uri, Some(json!({ "meta_action": "TL" }).to_string())).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["agents"][0]["override"], "TL");
    for _ in 0..3 {
        let (_, rec) = step(&app, &id, None).await;
        assert_eq!(rec["agents"][0]["meta_action"], "TL");
        assert_eq!(rec["agents"][0]["injected"], true);
    }
    let (status, v) = call(&app, Method::DELETE, &uri, None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(v["agents"][0]["override"].is_null());
    let (_, rec) = step(&app, &id, None).await;
    assert_eq!(rec["agents"][0]["injected"], false);
    let (status, _) = call(&app, Method::PUT, &format!("/v1/sessions/{id}/overrides/77"), Some(json!({ "meta_action": "TL" }).to_string())).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn eighty_steps_then_conflict() {
    let app = app();
    let id = create(&app, 3).await;
    for f in 0..80 {
        let (status, rec) = step(&app, &id, None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(rec["frame"], f);
    }
    let (status, v) = step(&app, &id, None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(v["error"].as_str().unwrap().contains("horizon"));
    let (status, _) = step(&app, &id, Some(json!({ "overrides": { "1": "KL" } }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn service_steps_match_the_library() {
    let app = app();
    let id = create(&app, 9).await;
    let mut lib = create_session(&scene(), policy(), sim(), 9).unwrap();
    for f in 0..15 {
        let body = (f == 4).then(|| json!({ "overrides": { "2": "RLC" } }));
        let (_, v) = step(&app, &id, body).await;
        let got: StepRecord = serde_json::from_value(v).unwrap();
        let want = if f == 4 { lib.step_with(&[(2, MetaAction::RightLaneChange)]).unwrap() } else { lib.step().unwrap() };
        assert_eq!(got, want);
    }
}

#[tokio::test]
async fn reset_replays_the_first_step() {
    let app = app();
    let id = create(&app, 4).await;
    let (_, first) = step(&app, &id, None).await;
    step(&app, &id, Some(json!({ "overrides": { "1": "ST" } }))).await;
    let (status, v) = call(&app, Method::POST, &format!("/v1/sessions/{id}/reset"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["current_frame"], 0);
    assert!(v["agents"][0]["override"].is_null());
    let (_, again) = step(&app, &id, None).await;
    assert_eq!(first, again);
}

#[tokio::test]
async fn unknown_sessions_are_not_found() {
    let app = app();
    for (m, uri) in [
        (Method::GET, "/v1/sessions/nope"),
        (Method::POST, "/v1/sessions/nope/step"),
        (Method::POST, "/v1/sessions/nope/reset"),
        (Method::DELETE, "/v1/sessions/nope"),
    ] {
        let (status, v) = call(&app, m, uri, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert!(v["error"].as_str().unwrap().contains("nope"));
    }
    let id = create(&app, 0).await;
    let (status, _) = call(&app, Method::DELETE, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, _) = call(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn malformed_bodies_are_bad_requests_with_diagnostics() {
    let app = app();
    let id = create(&app, 0).await;
    let cases = [
        (format!("/v1/sessions/{id}/step"), "{\"overides\": {}}", "unknown field `overides`"),
        (format!("/v1/sessions/{id}/step"), "{\"overrides\": {\"1\": \"XX\"}}", "unknown variant `XX`"),
        (format!("/v1/sessions/{id}/step"), "{not json", "line 1"),
        ("/v1/sessions".to_string(), "{\"seed\": 1}", "missing field `scene`"),
    ];
    for (uri, body, needle) in cases {
        let (status, v) = call(&app, Method::POST, &uri, Some(body.to_string())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{uri} {body}");
        let msg = v["error"].as_str().unwrap();
        assert!(msg.contains(needle), "{msg}");
    }
    let mut bad = SceneFile::from_scene(&scene());
    bad.map.clear();
    let (status, v) = call(&app, Method::POST, "/v1/sessions", Some(json!({ "scene": bad }).to_string())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "no lanes");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_steps_on_one_session_are_serialized() {
    let app = app();
    let id = create(&app, 5).await;
    let mut handles = Vec::new();
    for _ in 0..16 {
        let app = app.clone();
        let id = id.clone();
        handles.push(tokio::spawn(async move { step(&app, &id, None).await }));
    }
    let mut frames = Vec::new();
    for h in handles {
        let (status, v) = h.await.unwrap();
        match status {
            StatusCode::OK => frames.push(v["frame"].as_u64().unwrap()),
            StatusCode::CONFLICT => {}
            other => panic!("{other}: {v}"),
        }
    }
    frames.sort_unstable();
    assert_eq!(frames, (0..frames.len() as u64).collect::<Vec<_>>());
    let (_, v) = call(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(v["current_frame"].as_u64().unwrap(), frames.len() as u64);
}
