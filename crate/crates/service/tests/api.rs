use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use sgldm::conditioning::RegionLayout;
use sgldm::pipeline::Synthesizer;
use sgldm::training::{untrained_stage2, Stage, TrainConfig};
use sgldm::unet::UNetConfig;
use sgldm_service::{start, AppState, ServiceConfig};
use tower::ServiceExt;

fn tiny_model() -> Synthesizer {
    let mut cfg = TrainConfig::toy(Stage::Two);
    cfg.model.unet = UNetConfig::new(4, 1);
    cfg.model.multi_ae.latent_dim = 8;
    cfg.model.multi_ae.width = 2;
    cfg.model.tau.width = 4;
    cfg.model.image_ae.width = 4;
    cfg.model.diffusion.steps = 10;
    let layout = RegionLayout::default_for_canvas(256).unwrap();
    Synthesizer::from_checkpoint(&untrained_stage2(&cfg, &layout).unwrap()).unwrap()
}

fn app(model: bool) -> Router {
    let config = ServiceConfig {
        max_steps: 8,
        default_steps: 2,
        ..ServiceConfig::default()
    };
    start(AppState::new(config, model.then(tiny_model)))
}

fn sketch_png(size: u32) -> String {
    let img = image::GrayImage::from_fn(size, size, |x, y| {
        image::Luma([if x == size / 2 || y == size / 3 { 0 } else { 255 }])
    });
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).unwrap();
    B64.encode(buf.into_inner())
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn post(app: &Router, body: Value) -> (StatusCode, Value) {
    let req = Request::post("/api/jobs")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    call(app, req).await
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn wait_done(app: &Router, id: &str) -> Value {
    for _ in 0..600 {
        let (status, rec) = get(app, &format!("/api/jobs/{id}")).await;
        assert_eq!(status, StatusCode::OK);
        if rec["state"] == "done" || rec["state"] == "failed" {
            return rec;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("job {id} did not finish");
}

#[tokio::test]
async fn health_without_model_and_jobs_refused() {
    let app = app(false);
    let (status, body) = get(&app, "/healthz").await;
    assert_eq!(status, StatusCode::OK);
    assert!(body["model"].is_null());
    let (status, _) = post(&app, json!({ "sketch": sketch_png(256) })).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let (status, cfg) = get(&app, "/api/config").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(cfg["model_loaded"], false);
    assert_eq!(cfg["layout"]["canvas"], 256);
}

#[tokio::test]
async fn job_lifecycle_and_cache() {
    let app = app(true);
    let (_, health) = get(&app, "/healthz").await;
    assert_eq!(health["model"]["canvas"], 256);

    let body = json!({ "sketch": sketch_png(256), "steps": 2, "sampler": "ddim", "seed": 42 });
    let (status, rec) = post(&app, body.clone()).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert!(rec["state"] == "queued" || rec["state"] == "running", "{rec}");
    assert_eq!(rec["cache_hit"], false);
    let id = rec["id"].as_str().unwrap().to_string();

    let done = wait_done(&app, &id).await;
    assert_eq!(done["state"], "done", "{done}");
    assert_eq!(done["seed"], 42);
    assert_eq!(done["sampler"], "ddim");
    let png = B64.decode(done["result_png"].as_str().unwrap()).unwrap();
    let img = image::load_from_memory(&png).unwrap();
    assert_eq!((img.width(), img.height()), (256, 256));

    let (status, again) = post(&app, body).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(again["cache_hit"], true);
    assert_eq!(again["state"], "done");
    assert_eq!(again["result_png"], done["result_png"]);
    assert_ne!(again["id"], done["id"]);
}

#[tokio::test]
async fn seeded_requests_reproduce_without_cache() {
    // Separate servers, so the second result is recomputed.
    let body = json!({ "sketch": sketch_png(256), "steps": 2, "seed": 7, "masked_regions": ["mouth"] });
    let mut images = Vec::new();
    for _ in 0..2 {
        let app = app(true);
        let (_, rec) = post(&app, body.clone()).await;
        let done = wait_done(&app, rec["id"].as_str().unwrap()).await;
        assert_eq!(done["cache_hit"], false);
        assert_eq!(done["masked_regions"], json!(["mouth"]));
        images.push(done["result_png"].clone());
    }
    assert_eq!(images[0], images[1]);
}

#[tokio::test]
async fn validation_errors() {
    let app = app(true);
    let (status, body) = post(&app, json!({ "sketch": sketch_png(128) })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].as_str().unwrap().contains("128x128"), "{body}");
    for bad in [
        json!({ "sketch": "not base64!" }),
        json!({ "sketch": B64.encode(b"plain bytes") }),
        json!({ "sketch": sketch_png(256), "steps": 9 }),
        json!({ "sketch": sketch_png(256), "steps": 0 }),
        json!({ "sketch": sketch_png(256), "sampler": "ddim", "eta": 2.0 }),
        json!({ "sketch": sketch_png(256), "sampler": "ddpm", "eta": 0.5 }),
        json!({ "sketch": sketch_png(256), "masked_regions": ["ear"] }),
        json!({ "sketch": sketch_png(256), "extra": 1 }),
        json!({ "steps": 2 }),
    ] {
        let (status, _) = post(&app, bad.clone()).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{bad}");
    }
    let req = Request::post("/api/jobs").body(Body::from("{")).unwrap();
    assert_eq!(call(&app, req).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = get(&app, "/api/jobs/job-999999").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn queue_depth_and_fifo_completion() {
    let app = app(true);
    let mut ids = Vec::new();
    for seed in 0..3 {
        let (_, rec) = post(&app, json!({ "sketch": sketch_png(256), "steps": 1, "seed": seed })).await;
        ids.push(rec["id"].as_str().unwrap().to_string());
    }
    let (_, health) = get(&app, "/healthz").await;
    assert_eq!(health["jobs"], 3);
    assert!(health["queue_depth"].as_u64().unwrap() >= 1, "{health}");
    for id in &ids {
        let rec = wait_done(&app, id).await;
        assert_eq!(rec["state"], "done");
        assert!(rec["timings"]["queue_ms"].is_u64() && rec["timings"]["run_ms"].is_u64());
    }
    let (_, health) = get(&app, "/healthz").await;
    assert_eq!(health["queue_depth"], 0);
}

#[tokio::test]
async fn unseeded_request_reports_chosen_seed() {
    let app = app(true);
    let (_, rec) = post(&app, json!({ "sketch": sketch_png(256), "sampler": "ddpm", "steps": 1 })).await;
    assert!(rec["seed"].as_u64().unwrap() < (1 << 53));
    assert!(rec["eta"].is_null());
    let done = wait_done(&app, rec["id"].as_str().unwrap()).await;
    assert_eq!(done["state"], "done");
    assert_eq!(done["sampler"], "ddpm");
}

#[tokio::test]
async fn cors_headers() {
    let app = app(false);
    let req = Request::builder()
        .method("OPTIONS")
        .uri("/api/jobs")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");
    let resp = app
        .oneshot(Request::get("/healthz").header(header::ORIGIN, "http://x").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");
}
