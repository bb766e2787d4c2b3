//! The session API and the `/draw` protocol, driven through the router.

use std::sync::Arc;

use autostudio_cli::server::{router, AppState};
use autostudio_core::drawer::{
    png_dimensions, Capabilities, DrawRequest, DrawResponse, DrawSubject, Drawer, HttpDrawer, HttpDrawerConfig, ToyDrawer,
};
use autostudio_core::engine::{EngineConfig, LayoutOrigin, TurnRecord};
use autostudio_core::layout::{BoundingBox, FrameSize, LayoutDocument};
use autostudio_core::registry::SubjectId;
use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app(root: &std::path::Path) -> (Router, Arc<AppState>) {
    let base = EngineConfig { frame: FrameSize::new(256, 256), seed: 5, ..Default::default() };
    let state = Arc::new(AppState::new(root.to_path_buf(), base));
    (router(state.clone()), state)
}

async fn send(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let body = body.map(|v| Body::from(v.to_string())).unwrap_or_else(Body::empty);
    let req = Request::builder().method(method).uri(uri).header(header::CONTENT_TYPE, "application/json").body(body).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn send_json(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = send(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn create(app: &Router, overrides: Value) -> String {
    let (status, body) = send_json(app, Method::POST, "/session", Some(overrides)).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body["id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn session_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    let id = create(&app, json!({"seed": 9})).await;

    let (status, rec) = send_json(&app, Method::POST, &format!("/session/{id}/turn"), Some(json!({"prompt": "a dog in a park"}))).await;
    assert_eq!(status, StatusCode::OK, "{rec}");
    let rec: TurnRecord = serde_json::from_value(rec).unwrap();
    assert_eq!(rec.k, 1);
    assert_eq!(rec.seed, autostudio_core::seed::turn_seed(9, 1));

    let (status, state) = send_json(&app, Method::GET, &format!("/session/{id}/state"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(state["turns"].as_array().unwrap().len(), 1);
    assert_eq!(state["config"]["seed"], 9);
    assert!(state["db"]["records"]["1"].is_object(), "{}", state["db"]);

    let (status, png) = send(&app, Method::GET, &format!("/session/{id}/image/1"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(png_dimensions(&png).unwrap(), (256, 256));

    let (status, layout) = send_json(&app, Method::GET, &format!("/session/{id}/layout/1"), None).await;
    assert_eq!(status, StatusCode::OK);
    let mut doc: LayoutDocument = serde_json::from_value(layout).unwrap();
    assert_eq!(doc, rec.final_layout);

    for e in doc.entries.iter_mut() {
        e.bbox.x = e.bbox.x.saturating_sub(30);
    }
    let uri = format!("/session/{id}/layout/1/override");
    let (status, updated) = send_json(&app, Method::POST, &uri, Some(serde_json::to_value(&doc).unwrap())).await;
    assert_eq!(status, StatusCode::OK, "{updated}");
    let updated: TurnRecord = serde_json::from_value(updated).unwrap();
    assert_eq!((updated.k, updated.revision), (1, 1));
    assert_eq!(updated.layout_origin, LayoutOrigin::Override);
    let (_, redrawn) = send(&app, Method::GET, &format!("/session/{id}/image/1"), None).await;
    let (status, original) = send(&app, Method::GET, &format!("/session/{id}/image/1?revision=0"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(original, png);
    assert_ne!(redrawn, png);
    let (status, _) = send(&app, Method::GET, &format!("/session/{id}/image/1?revision=7"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn error_mapping() {
    let dir = tempfile::tempdir().unwrap();
    let (app, state) = app(dir.path());
    let turn = json!({"prompt": "a cat"});

    let (status, _) = send(&app, Method::POST, "/session/nope/turn", Some(turn.clone())).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = send(&app, Method::GET, "/session/nope/state", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = send(&app, Method::GET, "/session/..%2F/state", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = send(&app, Method::POST, "/session", Some(json!({"alpha": 2.0}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let id = create(&app, json!({})).await;
    let uri = format!("/session/{id}/turn");
    let (status, _) = send(&app, Method::POST, &uri, Some(json!({"text": "a cat"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = send(&app, Method::POST, &uri, Some(json!({"prompt": " "}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = send(&app, Method::POST, &uri, Some(json!({"prompt": "the cat", "mode": "edit", "edit_target": "1"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = send(&app, Method::GET, &format!("/session/{id}/layout/1"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    // A turn in flight holds the session lock.
    let slot = state.slot(&id).unwrap();
    let guard = slot.session.clone().lock_owned().await;
    let (status, body) = send_json(&app, Method::POST, &uri, Some(turn.clone())).await;
    assert_eq!(status, StatusCode::CONFLICT, "{body}");
    let (status, _) = send(&app, Method::GET, &format!("/session/{id}/state"), None).await;
    assert_eq!(status, StatusCode::OK);
    drop(guard);
    let (status, _) = send(&app, Method::POST, &uri, Some(turn)).await;
    assert_eq!(status, StatusCode::OK);

    let bad_override = json!({"frame": {"width": 256, "height": 256}, "entries": []});
    let (status, _) = send(&app, Method::POST, &format!("/session/{id}/layout/1/override"), Some(bad_override)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn sessions_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (first, _) = app(dir.path());
    let id = create(&first, json!({})).await;
    let (status, _) = send(&first, Method::POST, &format!("/session/{id}/turn"), Some(json!({"prompt": "a dog"}))).await;
    assert_eq!(status, StatusCode::OK);

    let (second, _) = app(dir.path());
    let (status, rec) = send_json(&second, Method::POST, &format!("/session/{id}/turn"), Some(json!({"prompt": "a cat"}))).await;
    assert_eq!(status, StatusCode::OK, "{rec}");
    assert_eq!(rec["k"], 2);
}

fn draw_request() -> DrawRequest {
    let mut r = DrawRequest::new(FrameSize::new(128, 96), 3);
    r.global_caption = "a dog on a beach".into();
    r.subjects = vec![DrawSubject {
        id: SubjectId::subject(1),
        caption: "a dog".into(),
        bbox: BoundingBox::new(16, 16, 64, 64),
        components: vec![],
        embedding: None,
    }];
    r
}

#[tokio::test]
async fn draw_protocol_over_the_router() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    let req = draw_request();
    let (status, body) = send_json(&app, Method::POST, "/draw", Some(serde_json::to_value(&req).unwrap())).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let resp: DrawResponse = serde_json::from_value(body).unwrap();
    assert_eq!(resp, ToyDrawer::default().draw(&req).unwrap());

    let mut v = serde_json::to_value(&req).unwrap();
    v["schema_version"] = json!(2);
    let (status, _) = send(&app, Method::POST, "/draw", Some(v)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = send(&app, Method::POST, "/draw", Some(json!({"frame": 1}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, caps) = send_json(&app, Method::GET, "/capabilities", None).await;
    assert_eq!(status, StatusCode::OK);
    let caps: Capabilities = serde_json::from_value(caps).unwrap();
    assert_eq!(caps, ToyDrawer::default().capabilities().unwrap());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn http_drawer_talks_to_the_served_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });

    let (remote, caps, local) = tokio::task::spawn_blocking(move || {
        let client = HttpDrawer::new(HttpDrawerConfig { endpoint: format!("http://{addr}/"), timeout_secs: 30 });
        let req = draw_request();
        (client.draw(&req).unwrap(), client.capabilities().unwrap(), ToyDrawer::default().draw(&req).unwrap())
    })
    .await
    .unwrap();
    assert_eq!(remote, local);
    assert_eq!(caps.drawer, "toy");
}
