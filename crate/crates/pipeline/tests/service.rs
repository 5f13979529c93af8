mod common;

use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use splatdrag::service::{build, decode_depth_frame, ServiceConfig};
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    app: Router,
    resolution: usize,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let base = common::toy_config(dir.path());
    let resolution = base.rig.resolution;
    let app = build(ServiceConfig {
        artifact_root: dir.path().join("artifacts"),
        asset: Some(base.asset.clone()),
        base,
    })
    .unwrap();
    Fixture { _dir: dir, app, resolution }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or(Body::empty(), |b| Body::from(b.to_string()))).unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn wait_done(app: &Router, id: &str) -> Value {
    let start = Instant::now();
    loop {
        let (status, run) = call_json(app, "GET", &format!("/runs/{id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        if run["status"] == "complete" || run["status"] == "failed" {
            return run;
        }
        assert!(start.elapsed() < Duration::from_secs(300), "run {id} did not finish");
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn asset_views_are_four_pngs_with_raw_depth() {
    let f = fixture();
    let (status, body) = call_json(&f.app, "GET", "/asset/views", None).await;
    assert_eq!(status, StatusCode::OK);
    let views = body["views"].as_array().unwrap();
    assert_eq!(views.len(), 4);
    for (i, v) in views.iter().enumerate() {
        let png = base64::engine::general_purpose::STANDARD.decode(v["png"].as_str().unwrap()).unwrap();
        assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
        let width = u32::from_be_bytes(png[16..20].try_into().unwrap());
        assert_eq!(width as usize, f.resolution);

        let (status, frame) = call(&f.app, "GET", v["depth"].as_str().unwrap(), None).await;
        assert_eq!(status, StatusCode::OK);
        let (header, depth) = decode_depth_frame(&frame).unwrap();
        assert_eq!(header.view, i);
        assert_eq!(header.shape, [f.resolution, f.resolution]);
        let center = depth[f.resolution / 2 * f.resolution + f.resolution / 2];
        assert!(center.is_finite() && center > 0.0);
        assert!(depth.iter().any(|d| d.is_infinite()), "no background pixels");
    }
    let (status, _) = call(&f.app, "GET", "/asset/views/4/depth", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn drag_payloads_are_validated() {
    let f = fixture();
    let (status, body) = call_json(&f.app, "POST", "/drags", Some(json!({ "pairs": [] }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].as_str().unwrap().contains("at least one pair"));

    let bad = json!({ "pairs": [{ "source": [0, 0], "target": [0, 0, 0] }] });
    let (status, body) = call_json(&f.app, "POST", "/drags", Some(bad)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "pairs[0].source");

    let (status, _) = call(&f.app, "POST", "/drags", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

/// The annotator's pick: unproject a foreground pixel through its view's
/// depth; the server must mark the resulting handle visible there.
#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn picked_handle_projects_back_to_its_pixel() {
    let f = fixture();
    let r = f.resolution;
    let (_, views) = call_json(&f.app, "GET", "/asset/views", None).await;
    let rig: splatdrag_core::RigConfig = serde_json::from_value(views["rig"].clone()).unwrap();
    for view in 0..4 {
        let (_, frame) = call(&f.app, "GET", &format!("/asset/views/{view}/depth"), None).await;
        let (_, depth) = decode_depth_frame(&frame).unwrap();
        let cam = rig.camera(view).unwrap();
        let pick = |col: usize, row: usize| cam.unproject(col as f64, row as f64, depth[row * r + col] as f64);
        let (a, b) = ((r / 2, r / 2), (r / 2 + 2, r / 2 - 3));
        let (p, q) = (pick(a.0, a.1), pick(b.0, b.1));
        let drags = json!({ "pairs": [{ "source": [p.x, p.y, p.z], "target": [q.x, q.y, q.z] }] });
        let (status, body) = call_json(&f.app, "POST", "/drags", Some(drags)).await;
        assert_eq!(status, StatusCode::OK);
        let proj = &body["drags"]["projections"][view][0];
        assert_eq!(proj["visible"], true, "view {view}: {proj}");
        let px = proj["p"].as_array().unwrap();
        let (du, dv) = (px[0].as_i64().unwrap() - a.0 as i64, px[1].as_i64().unwrap() - a.1 as i64);
        assert!(du.abs() <= 1 && dv.abs() <= 1, "view {view}: reprojected to {px:?}");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn runs_move_through_queued_running_complete() {
    let f = fixture();
    let submit = json!({ "drags": common::one_pair(), "config": { "seed": 3 } });
    let (status, body) = call_json(&f.app, "POST", "/runs", Some(submit.clone())).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let first = body["id"].as_str().unwrap().to_string();
    let (_, body) = call_json(&f.app, "POST", "/runs", Some(submit)).await;
    let second = body["id"].as_str().unwrap().to_string();
    assert_ne!(first, second);

    let a = wait_done(&f.app, &first).await;
    let b = wait_done(&f.app, &second).await;
    for run in [&a, &b] {
        assert_eq!(run["history"], json!(["queued", "running", "complete"]), "{}", run["error"]);
        assert_eq!(run["manifest"]["stages"].as_array().unwrap().len(), 7);
    }
    // One job at a time, in submission order.
    let last_of_a = a["manifest"]["events"].as_array().unwrap().last().unwrap()["unix_ms"].as_u64().unwrap();
    let first_of_b = b["manifest"]["events"][0]["unix_ms"].as_u64().unwrap();
    assert!(first_of_b >= last_of_a);

    let (status, dai) = call_json(&f.app, "GET", &format!("/runs/{first}/artifacts/dai.json"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(dai["gammas"].as_object().unwrap().len(), 5);
    let (status, png) = call(&f.app, "GET", &format!("/runs/{first}/artifacts/final_views/view_2.png"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(&png[..4], b"\x89PNG");
    let (status, _) = call(&f.app, "GET", &format!("/runs/{first}/artifacts/..%2F..%2Fasset.ply"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&f.app, "GET", "/runs/run-9999", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn invalid_run_requests_are_rejected() {
    let f = fixture();
    let (status, body) = call_json(&f.app, "POST", "/runs", Some(json!({ "config": { "refine_resolution": 7 } }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].as_str().unwrap().contains("refine_resolution"));
    let (status, body) = call_json(&f.app, "POST", "/runs", Some(json!({ "config": { "seed": "x" } }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "config.seed");
    let (status, _) = call_json(&f.app, "POST", "/runs", Some(json!({ "drags": { "pairs": [] } }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}
