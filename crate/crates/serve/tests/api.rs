use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use futures_util::StreamExt;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use tfserve::registry::toy_features;
use tfserve::{router, AppState, Registry};
use tfseg::synthgen::gen_sphere;
use tfseg::Dims;

fn app(data_dir: &std::path::Path) -> (Router, Arc<AppState>) {
    let d = Dims::cube(24);
    let (v, _) = gen_sphere(d, [11.5; 3], 7.0, 0.8, 0.2, 0.0).unwrap();
    let f = toy_features(&v).unwrap();
    let mut reg = Registry::new();
    reg.insert("ball", v, f).unwrap();
    let st = AppState::new(reg, data_dir);
    (router(st.clone()), st)
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
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
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn new_session(app: &Router) -> String {
    let (s, v) = call_json(app, Method::POST, "/sessions", Some(json!({"v": 1, "volume_id": "ball"}))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_string()
}

async fn add_class(app: &Router, sid: &str, id: u32) {
    let (s, v) = call_json(
        app,
        Method::POST,
        &format!("/sessions/{sid}/classes"),
        Some(json!({"v": 1, "id": id, "name": format!("c{id}"), "iso_value": 0.5})),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
}

async fn annotate(app: &Router, sid: &str, cid: u32, points: Value) -> (StatusCode, Value) {
    call_json(
        app,
        Method::POST,
        &format!("/sessions/{sid}/classes/{cid}/annotations"),
        Some(json!({"v": 1, "points": points})),
    )
    .await
}

#[tokio::test]
async fn create_get_and_isolation() {
    let tmp = tempfile::tempdir().unwrap();
    let (app, _) = app(tmp.path());
    let a = new_session(&app).await;
    let b = new_session(&app).await;
    assert_ne!(a, b);
    let (s, snap) = call_json(&app, Method::GET, &format!("/sessions/{a}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(snap["v"], 1);
    assert_eq!(snap["volume_id"], "ball");
    add_class(&app, &a, 1).await;
    let (_, sb) = call_json(&app, Method::GET, &format!("/sessions/{b}"), None).await;
    assert_eq!(sb["classes"].as_array().unwrap().len(), 0);

    let (s, _) = call_json(&app, Method::POST, "/sessions", Some(json!({"v": 1, "volume_id": "nope"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call_json(&app, Method::GET, "/sessions/missing", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, v) = call_json(&app, Method::GET, "/volumes", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["volumes"][0]["id"], "ball");
}

#[tokio::test]
async fn bodies_must_carry_version() {
    let tmp = tempfile::tempdir().unwrap();
    let (app, _) = app(tmp.path());
    let (s, v) = call_json(&app, Method::POST, "/sessions", Some(json!({"volume_id": "ball"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["v"], 1);
    let (s, _) = call_json(&app, Method::POST, "/sessions", Some(json!({"v": 2, "volume_id": "ball"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn class_lifecycle_and_invalidation() {
    let tmp = tempfile::tempdir().unwrap();
    let (app, _) = app(tmp.path());
    let sid = new_session(&app).await;
    add_class(&app, &sid, 1).await;
    let (s, out) = annotate(&app, &sid, 1, json!([[11, 11, 11]])).await;
    assert_eq!(s, StatusCode::OK, "{out}");
    let digest = out["digest"].as_str().unwrap().to_string();

    // Iso-value is a threshold, not an input.
    let uri = format!("/sessions/{sid}/classes/1");
    let (s, _) = call_json(&app, Method::PATCH, &uri, Some(json!({"v": 1, "iso_value": 0.9}))).await;
    assert_eq!(s, StatusCode::OK);
    let (_, snap) = call_json(&app, Method::GET, &format!("/sessions/{sid}"), None).await;
    assert_eq!(snap["similarities"]["1"]["low"], digest.as_str());
    assert_eq!(snap["recomputes"], 1);
    assert_eq!(snap["classes"][0]["iso_value"], 0.9);

    let (s, _) = call_json(&app, Method::PATCH, &uri, Some(json!({"v": 1, "proximity": 0.5}))).await;
    assert_eq!(s, StatusCode::OK);
    let (_, snap) = call_json(&app, Method::GET, &format!("/sessions/{sid}"), None).await;
    assert_ne!(snap["similarities"]["1"]["low"], digest.as_str());
    assert_eq!(snap["recomputes"], 2);

    // Solver settings sit behind the advanced flag.
    let cfg = json!({"v": 1, "solver_cfg": {"lambda": 64.0}});
    let (s, _) = call_json(&app, Method::PATCH, &uri, Some(cfg)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let cfg = json!({"v": 1, "advanced": true, "solver_cfg": {"lambda": 64.0}});
    let (s, v) = call_json(&app, Method::PATCH, &uri, Some(cfg)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["class"]["solver_cfg"]["lambda"], 64.0);
    assert_eq!(v["class"]["solver_cfg"]["sigma_spatial"], 8.0);

    let (s, _) = call_json(&app, Method::PATCH, &uri, Some(json!({"v": 1, "iso_value": 2.0}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, _) = call_json(&app, Method::DELETE, &uri, None).await;
    assert_eq!(s, StatusCode::OK);
    let (_, snap) = call_json(&app, Method::GET, &format!("/sessions/{sid}"), None).await;
    assert!(snap["annotations"].get("1").is_none());
    assert!(snap["similarities"].get("1").is_none());
    let (s, _) = annotate(&app, &sid, 1, json!([[1, 1, 1]])).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn brush_batches_one_recompute_and_refreshes_overlay() {
    let tmp = tempfile::tempdir().unwrap();
    let (app, _) = app(tmp.path());
    let sid = new_session(&app).await;
    add_class(&app, &sid, 1).await;
    let slice = format!("/sessions/{sid}/slice/z/11?overlay=1");
    let (s, before) = call(&app, Method::GET, &slice, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&before[1..4], b"PNG");

    let stroke: Vec<[i64; 3]> = (0..10).map(|k| [6 + k, 11, 11]).collect();
    let (s, out) = annotate(&app, &sid, 1, json!(stroke)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(out["changed"], 10);
    assert_eq!(out["recomputes"], 1);
    let (_, after) = call(&app, Method::GET, &slice, None).await;
    assert_ne!(before, after);

    let (s, _) = annotate(&app, &sid, 1, json!([[99, 0, 0]])).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, Method::GET, &format!("/sessions/{sid}/slice/z/99"), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, Method::GET, &format!("/sessions/{sid}/slice/w/1"), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let erase = json!({"v": 1, "point": [8, 11, 11], "radius": 2.0});
    let (s, out) = call_json(&app, Method::POST, &format!("/sessions/{sid}/classes/1/erase"), Some(erase)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(out["changed"], 5);
    assert_eq!(out["recomputes"], 2);
}

#[tokio::test]
async fn render_returns_png_and_rejects_bad_camera() {
    let tmp = tempfile::tempdir().unwrap();
    let (app, _) = app(tmp.path());
    let sid = new_session(&app).await;
    let cam = json!({"eye": [60, 11.5, 11.5], "look_at": [11.5, 11.5, 11.5], "up": [0, 0, 1], "fov": 40, "width": 32, "height": 24});
    let uri = |c: &Value| format!("/sessions/{sid}/render?cam={}", urlencode(&c.to_string()));
    // Nothing to draw yet: background frame.
    let (s, img) = call(&app, Method::GET, &uri(&cam), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&img[1..4], b"PNG");
    add_class(&app, &sid, 1).await;
    annotate(&app, &sid, 1, json!([[11, 11, 11]])).await;
    let (s, a) = call(&app, Method::GET, &uri(&cam), None).await;
    assert_eq!(s, StatusCode::OK);
    let (_, b) = call(&app, Method::GET, &uri(&cam), None).await;
    assert_eq!(a, b);
    let mut bad = cam.clone();
    bad["look_at"] = bad["eye"].clone();
    let (s, _) = call(&app, Method::GET, &uri(&bad), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, Method::GET, &format!("/sessions/{sid}/render?cam=notjson"), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

fn urlencode(s: &str) -> String {
    s.bytes()
        .map(|b| match b {
            b'a'..=b'z' | b'A'..=b'Z' | b'0'..=b'9' | b'-' | b'_' | b'.' => (b as char).to_string(),
            _ => format!("%{b:02X}"),
        })
        .collect()
}

#[tokio::test]
async fn save_load_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let (app, _) = app(tmp.path());
    let sid = new_session(&app).await;
    add_class(&app, &sid, 1).await;
    add_class(&app, &sid, 2).await;
    annotate(&app, &sid, 1, json!([[11, 11, 11], [10, 12, 11]])).await;
    annotate(&app, &sid, 2, json!([[1, 1, 1]])).await;
    call_json(&app, Method::PATCH, &format!("/sessions/{sid}/classes/2"), Some(json!({"v": 1, "proximity": 0.3, "color": [1, 0, 0]}))).await;
    let (s, saved) = call_json(&app, Method::POST, &format!("/sessions/{sid}/save"), None).await;
    assert_eq!(s, StatusCode::OK, "{saved}");
    let path = saved["path"].as_str().unwrap().to_string();

    let (s, loaded) = call_json(&app, Method::POST, "/sessions/load", Some(json!({"v": 1, "path": path}))).await;
    assert_eq!(s, StatusCode::CREATED, "{loaded}");
    let (_, orig) = call_json(&app, Method::GET, &format!("/sessions/{sid}"), None).await;
    assert_ne!(loaded["id"], orig["id"]);
    for k in ["classes", "annotations", "similarities", "camera", "volume_id"] {
        assert_eq!(loaded[k], orig[k], "{k}");
    }

    // Missing map file.
    let dir = std::path::Path::new(&path).parent().unwrap();
    std::fs::remove_file(dir.join("class_2_low.svol")).unwrap();
    let (s, _) = call_json(&app, Method::POST, "/sessions/load", Some(json!({"v": 1, "path": path}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    // Version guard on the saved file.
    let mut doc: Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    doc["v"] = json!(7);
    std::fs::write(&path, doc.to_string()).unwrap();
    let (s, v) = call_json(&app, Method::POST, "/sessions/load", Some(json!({"v": 1, "path": path}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST, "{v}");
}

async fn next_event<S>(ws: &mut S) -> Value
where
    S: futures_util::Stream<Item = Result<tokio_tungstenite::tungstenite::Message, tokio_tungstenite::tungstenite::Error>> + Unpin,
{
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(30), ws.next())
            .await
            .expect("event within 30 s")
            .unwrap()
            .unwrap();
        if let tokio_tungstenite::tungstenite::Message::Text(t) = msg {
            return serde_json::from_str(&t).unwrap();
        }
    }
}

async fn wait_for<S>(ws: &mut S, kind: &str) -> Value
where
    S: futures_util::Stream<Item = Result<tokio_tungstenite::tungstenite::Message, tokio_tungstenite::tungstenite::Error>> + Unpin,
{
    loop {
        let ev = next_event(ws).await;
        assert_eq!(ev["v"], 1);
        if ev["type"] == kind {
            return ev;
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn events_and_refine_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let (app, _) = app(tmp.path());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let server = app.clone();
    tokio::spawn(async move { axum::serve(listener, server).await.unwrap() });

    let sid = new_session(&app).await;
    add_class(&app, &sid, 1).await;
    add_class(&app, &sid, 2).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/sessions/{sid}/events")).await.unwrap();

    // Refine with no annotations reports an error event.
    let (s, job) = call_json(&app, Method::POST, &format!("/sessions/{sid}/classes/2/refine"), None).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let ev = wait_for(&mut ws, "refine_failed").await;
    assert_eq!(ev["class_id"], 2);
    assert_eq!(ev["job_id"], job["job_id"]);

    let (_, out) = annotate(&app, &sid, 1, json!([[11, 11, 11], [12, 11, 11]])).await;
    let ev = wait_for(&mut ws, "similarity_updated").await;
    assert_eq!(ev["class_id"], 1);
    assert_eq!(ev["digest"], out["digest"]);

    let (s, _) = call_json(&app, Method::POST, &format!("/sessions/{sid}/classes/1/refine"), None).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let ev = wait_for(&mut ws, "refined_ready").await;
    let (_, snap) = call_json(&app, Method::GET, &format!("/sessions/{sid}"), None).await;
    assert_eq!(snap["similarities"]["1"]["refined"], ev["digest"]);

    // The refined map is what the renderer sees now.
    let frame = format!("/sessions/{sid}/render?cam={}", urlencode(&json!({"eye": [60, 11.5, 11.5], "look_at": [11.5, 11.5, 11.5], "up": [0, 0, 1], "fov": 40, "width": 24, "height": 24}).to_string()));
    let (_, with_refined) = call(&app, Method::GET, &frame, None).await;

    annotate(&app, &sid, 1, json!([[10, 11, 11]])).await;
    wait_for(&mut ws, "refined_invalidated").await;
    let (_, snap) = call_json(&app, Method::GET, &format!("/sessions/{sid}"), None).await;
    assert!(snap["similarities"]["1"]["refined"].is_null());
    let (_, low_only) = call(&app, Method::GET, &frame, None).await;
    assert_ne!(with_refined, low_only);

    call_json(&app, Method::DELETE, &format!("/sessions/{sid}/classes/2"), None).await;
    let ev = wait_for(&mut ws, "class_deleted").await;
    assert_eq!(ev["class_id"], 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn annotate_stays_responsive_during_refine() {
    let tmp = tempfile::tempdir().unwrap();
    let (app, st) = app(tmp.path());
    let sid = new_session(&app).await;
    add_class(&app, &sid, 1).await;
    add_class(&app, &sid, 2).await;
    annotate(&app, &sid, 1, json!([[11, 11, 11]])).await;
    let mut rx = st.session(&sid).unwrap().subscribe();
    for _ in 0..3 {
        call_json(&app, Method::POST, &format!("/sessions/{sid}/classes/1/refine"), None).await;
    }
    let t = std::time::Instant::now();
    let (s, _) = annotate(&app, &sid, 2, json!([[2, 2, 2]])).await;
    assert_eq!(s, StatusCode::OK);
    assert!(t.elapsed() < Duration::from_secs(5));
    // Jobs complete in submission order.
    let mut jobs = vec![];
    while jobs.len() < 3 {
        let ev = tokio::time::timeout(Duration::from_secs(60), rx.recv()).await.unwrap().unwrap();
        if let Some(j) = ev.job_id {
            jobs.push(j);
        }
    }
    assert!(jobs.windows(2).all(|w| w[0] < w[1]), "{jobs:?}");
}
