use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use scene_removal::colmap::SparseModel;
use scene_removal::geometry::{pixel_direction, Vec2};
use scene_removal::mask::Mask;
use scene_removal::propagation::{run_points_prompt, PromptSet, ViewInput};
use scene_removal::service::{router, ServiceState};
use scene_removal::synthetic::{oracle_mask_predictor, write_dataset, SceneSpec, Surface};

struct Fixture {
    dir: tempfile::TempDir,
    spec: SceneSpec,
    model: SparseModel,
    app: axum::Router,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec::default();
    let model = write_dataset(&spec, 3, dir.path()).unwrap();
    let state = ServiceState::new(
        model.clone(),
        &dir.path().join("images"),
        Box::new(oracle_mask_predictor(&spec)),
        dir.path().join("export"),
    );
    let app = router(Arc::new(state));
    Fixture { dir, spec, model, app }
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn object_click(spec: &SceneSpec) -> (f64, f64) {
    let mask = spec.ground_truth_mask(0).unwrap();
    let fg: Vec<(u32, u32)> = mask.foreground().collect();
    let n = fg.len() as f64;
    let cx = fg.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let cy = fg.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let dist = |p: &&(u32, u32)| (p.0 as f64 - cx).powi(2) + (p.1 as f64 - cy).powi(2);
    let &(x, y) = fg.iter().min_by(|a, b| dist(a).total_cmp(&dist(b))).unwrap();
    (x as f64, y as f64)
}

#[tokio::test]
async fn lists_all_views_and_serves_images() {
    let f = fixture();
    let (status, body) = call(&f.app, "GET", "/api/views", None).await;
    assert_eq!(status, StatusCode::OK);
    let views: Vec<Value> = serde_json::from_slice(&body).unwrap();
    assert_eq!(views.len(), 8);
    assert_eq!(views[0]["name"], "view_000.png");
    assert_eq!(views[0]["width"], 64);

    let (status, body) = call(&f.app, "GET", "/api/image/1", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, std::fs::read(f.dir.path().join("images/view_000.png")).unwrap());
    assert_eq!(call(&f.app, "GET", "/api/image/99", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&f.app, "GET", "/api/image/abc", None).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn propagate_matches_library_and_lands_on_object() {
    let f = fixture();
    let (x, y) = object_click(&f.spec);
    let body = json!({"view_id": 1, "points": [{"x": x, "y": y}]});
    let (status, bytes) = call(&f.app, "POST", "/api/propagate", Some(body.clone())).await;
    assert_eq!(status, StatusCode::OK);
    let resp: Value = serde_json::from_slice(&bytes).unwrap();
    assert!(resp["timing_ms"].as_f64().unwrap() >= 0.0);

    let views = ViewInput::from_model(&f.model, None);
    let (expect, _) = run_points_prompt(&f.model, &oracle_mask_predictor(&f.spec), &views[0], &[Vec2::new(x, y)]).unwrap();
    let got = resp["views"].as_array().unwrap();
    assert_eq!(got.len(), expect.views.len());
    for (g, e) in got.iter().zip(&expect.views) {
        assert_eq!(g["view_id"], e.view_id);
        let pts: Vec<Vec2> = g["points"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| Vec2::new(p["x"].as_f64().unwrap(), p["y"].as_f64().unwrap()))
            .collect();
        assert_eq!(pts, e.points);
        // Exact sub-pixel rays; rounding to pixel centers can cross the limb.
        let pose = f.spec.pose(e.view_id as usize - 1);
        let cam = f.spec.intrinsics();
        assert!(pts.iter().all(|p| {
            let d = pixel_direction(&cam, &pose, p.x, p.y);
            matches!(f.spec.trace(&pose.center(), &d, true), Some(h) if h.surface == Surface::Object)
        }));
    }
    assert_eq!(resp["dropped"].as_array().unwrap().len(), expect.diagnostics.len());

    let (_, again) = call(&f.app, "POST", "/api/propagate", Some(body)).await;
    let mut a: Value = serde_json::from_slice(&again).unwrap();
    let mut b = resp.clone();
    a["timing_ms"] = Value::Null;
    b["timing_ms"] = Value::Null;
    assert_eq!(a, b);
}

#[tokio::test]
async fn propagate_error_statuses() {
    let f = fixture();
    let wall = json!({"view_id": 1, "points": [{"x": 1.0, "y": 1.0}]});
    assert_eq!(call(&f.app, "POST", "/api/propagate", Some(wall)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let unknown = json!({"view_id": 42, "points": [{"x": 1.0, "y": 1.0}]});
    assert_eq!(call(&f.app, "POST", "/api/propagate", Some(unknown)).await.0, StatusCode::NOT_FOUND);
    let malformed = json!({"view": 1});
    assert_eq!(call(&f.app, "POST", "/api/propagate", Some(malformed)).await.0, StatusCode::BAD_REQUEST);
    let no_points = json!({"view_id": 1, "points": []});
    assert_eq!(call(&f.app, "POST", "/api/propagate", Some(no_points)).await.0, StatusCode::BAD_REQUEST);
}

#[cfg(unix)]
#[tokio::test]
async fn external_predictor_failure_is_bad_gateway() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec::default();
    let model = write_dataset(&spec, 3, dir.path()).unwrap();
    let failing = scene_removal::propagation::ExecPredictor::new("false").unwrap();
    let app = router(Arc::new(ServiceState::new(
        model,
        &dir.path().join("images"),
        Box::new(failing),
        dir.path().join("export"),
    )));
    let body = json!({"view_id": 1, "points": [{"x": 30.0, "y": 30.0}]});
    assert_eq!(call(&app, "POST", "/api/propagate", Some(body.clone())).await.0, StatusCode::BAD_GATEWAY);
    assert_eq!(call(&app, "POST", "/api/mask", Some(body)).await.0, StatusCode::BAD_GATEWAY);
}

#[tokio::test]
async fn mask_preview_is_predictor_output() {
    let f = fixture();
    let (x, y) = object_click(&f.spec);
    let (status, png) = call(&f.app, "POST", "/api/mask", Some(json!({"view_id": 1, "points": [{"x": x, "y": y}]}))).await;
    assert_eq!(status, StatusCode::OK);
    let path = f.dir.path().join("preview.png");
    std::fs::write(&path, png).unwrap();
    assert_eq!(Mask::load_png(&path).unwrap(), f.spec.ground_truth_mask(0).unwrap());
}

#[tokio::test]
async fn export_writes_prompt_file_inside_output_dir() {
    let f = fixture();
    let (x, y) = object_click(&f.spec);
    let body = json!({"path": "session/prompts.json", "view_id": 1, "points": [{"x": x, "y": y}]});
    let (status, bytes) = call(&f.app, "POST", "/api/export", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    let resp: Value = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(resp["ok"], true);
    let written = f.dir.path().join("export/session/prompts.json");
    assert_eq!(resp["path"], written.display().to_string());

    let views = ViewInput::from_model(&f.model, None);
    let (expect, _) = run_points_prompt(&f.model, &oracle_mask_predictor(&f.spec), &views[0], &[Vec2::new(x, y)]).unwrap();
    assert_eq!(PromptSet::load_json(&written).unwrap().to_file(), expect.to_file());

    let escape = json!({"path": "../evil.json", "view_id": 1, "points": [{"x": x, "y": y}]});
    assert_eq!(call(&f.app, "POST", "/api/export", Some(escape)).await.0, StatusCode::BAD_REQUEST);
    assert!(!f.dir.path().join("evil.json").exists());
}
