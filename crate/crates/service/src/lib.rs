//! HTTP front end for the synthesizer. Requests become jobs in a FIFO queue
//! drained by one worker, so at most one sampling run uses the CPU at a
//! time; clients poll for results.

mod jobs;

use std::io::Cursor;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use sgldm::conditioning::{Region, RegionLayout, SketchBitmap};
use sgldm::diffusion::Sampler;
use sgldm::pipeline::{SynthesisOptions, Synthesizer};
use tokio::sync::Notify;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub use jobs::{JobRecord, JobState, Timings};
use jobs::JobStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    /// Stage 2 checkpoint. Without one the service answers health and
    /// config requests and rejects jobs with 503.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub max_steps: usize,
    pub default_steps: usize,
    /// Jobs waiting beyond this many are refused.
    pub queue_len: usize,
    pub cache_size: usize,
    /// Origins allowed by CORS; empty allows any.
    #[serde(default)]
    pub allowed_origins: Vec<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            checkpoint: None,
            max_steps: 250,
            default_steps: 50,
            queue_len: 64,
            cache_size: 128,
            allowed_origins: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerName {
    Ddpm,
    Ddim,
}

/// Body of `POST /api/jobs`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisRequest {
    /// Base64 PNG, dark strokes on white, at the model's canvas size.
    pub sketch: String,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub sampler: Option<SamplerName>,
    /// DDIM only; defaults to 0.
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub masked_regions: Vec<Region>,
}

#[derive(Clone)]
pub struct AppState {
    model: Option<Arc<Synthesizer>>,
    store: Arc<Mutex<JobStore>>,
    wake: Arc<Notify>,
    config: Arc<ServiceConfig>,
}

impl AppState {
    pub fn new(config: ServiceConfig, model: Option<Synthesizer>) -> Self {
        Self {
            model: model.map(Arc::new),
            store: Arc::new(Mutex::new(JobStore::new(config.cache_size))),
            wake: Arc::new(Notify::new()),
            config: Arc::new(config),
        }
    }

    fn store(&self) -> std::sync::MutexGuard<'_, JobStore> {
        self.store.lock().unwrap_or_else(|e| e.into_inner())
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn unprocessable(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::UNPROCESSABLE_ENTITY, msg.into())
}

/// Spawns the sampling worker and returns the router. Needs a Tokio
/// runtime.
pub fn start(state: AppState) -> Router {
    if let Some(model) = state.model.clone() {
        tokio::spawn(worker(state.clone(), model));
    }
    router(state)
}

fn router(state: AppState) -> Router {
    let cors = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    let cors = if state.config.allowed_origins.is_empty() {
        cors.allow_origin(Any)
    } else {
        let origins: Vec<HeaderValue> = state
            .config
            .allowed_origins
            .iter()
            .filter_map(|o| HeaderValue::from_str(o).ok())
            .collect();
        cors.allow_origin(AllowOrigin::list(origins))
    };
    Router::new()
        .route("/healthz", get(healthz))
        .route("/api/config", get(config))
        .route("/api/jobs", post(submit))
        .route("/api/jobs/{id}", get(job))
        .layer(cors)
        .with_state(state)
}

async fn worker(state: AppState, model: Arc<Synthesizer>) {
    loop {
        let next = state.store().start_next();
        let Some((id, sketch, opts)) = next else {
            state.wake.notified().await;
            continue;
        };
        let m = model.clone();
        let outcome = tokio::task::spawn_blocking(move || {
            let img = m.synthesize(&sketch, &opts).map_err(|e| e.to_string())?;
            encode_png(image::DynamicImage::ImageRgb8(img.to_rgb8()))
        })
        .await
        .unwrap_or_else(|e| Err(format!("worker panicked: {e}")));
        if let Err(e) = &outcome {
            log::warn!("{id} failed: {e}");
        }
        state.store().finish(&id, outcome);
    }
}

fn encode_png(img: image::DynamicImage) -> Result<String, String> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).map_err(|e| e.to_string())?;
    Ok(B64.encode(buf.into_inner()))
}

async fn healthz(State(state): State<AppState>) -> Json<serde_json::Value> {
    let (depth, jobs) = {
        let s = state.store();
        (s.queue_depth(), s.len())
    };
    let model = state.model.as_ref().map(|m| {
        json!({
            "checkpoint": m.identity(),
            "canvas": m.canvas(),
            "diffusion_steps": m.schedule().steps(),
        })
    });
    Json(json!({ "status": "ok", "model": model, "queue_depth": depth, "jobs": jobs }))
}

async fn config(State(state): State<AppState>) -> Json<serde_json::Value> {
    let layout = match &state.model {
        Some(m) => m.layout().clone(),
        None => RegionLayout::default_for_canvas(256).expect("default layout"),
    };
    let max_steps = state
        .model
        .as_ref()
        .map_or(state.config.max_steps, |m| state.config.max_steps.min(m.schedule().steps()));
    Json(json!({
        "model_loaded": state.model.is_some(),
        "canvas": layout.canvas(),
        "layout": layout,
        "regions": Region::ALL,
        "samplers": [SamplerName::Ddpm, SamplerName::Ddim],
        "max_steps": max_steps,
        "default_steps": state.config.default_steps.min(max_steps),
    }))
}

async fn job(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<JobRecord>, ApiError> {
    state
        .store()
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown job {id}")))
}

fn decode_sketch(b64: &str, canvas: usize) -> Result<SketchBitmap, ApiError> {
    let bytes = B64
        .decode(b64.trim())
        .map_err(|e| unprocessable(format!("sketch is not valid base64: {e}")))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| unprocessable(format!("sketch is not a PNG: {e}")))?;
    if img.width() as usize != canvas || img.height() as usize != canvas {
        return Err(unprocessable(format!(
            "sketch is {}x{}, expected {canvas}x{canvas}",
            img.width(),
            img.height()
        )));
    }
    SketchBitmap::from_luma8(&img.to_luma8()).map_err(|e| unprocessable(e.to_string()))
}

/// Hash of the decoded sketch and the sampling parameters.
fn request_hash(sketch: &SketchBitmap, opts: &SynthesisOptions) -> String {
    let mut h = Sha256::new();
    h.update(sketch.to_luma8().as_raw());
    h.update(serde_json::to_vec(opts).expect("options serialize"));
    hex::encode(h.finalize())
}

async fn submit(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let Some(model) = state.model.clone() else {
        return Err(ApiError(StatusCode::SERVICE_UNAVAILABLE, "no model loaded".into()));
    };
    let req: SynthesisRequest =
        serde_json::from_slice(&body).map_err(|e| unprocessable(format!("bad request body: {e}")))?;
    let sketch = decode_sketch(&req.sketch, model.canvas())?;
    let limit = state.config.max_steps.min(model.schedule().steps());
    let steps = req.steps.unwrap_or(state.config.default_steps.min(limit));
    if steps == 0 || steps > limit {
        return Err(unprocessable(format!("steps {steps} outside [1, {limit}]")));
    }
    let sampler_name = req.sampler.unwrap_or(SamplerName::Ddim);
    let sampler = match sampler_name {
        SamplerName::Ddpm if req.eta.is_some() => return Err(unprocessable("eta applies to ddim only")),
        SamplerName::Ddpm => Sampler::Ddpm,
        SamplerName::Ddim => {
            let eta = req.eta.unwrap_or(0.0);
            if !(0.0..=1.0).contains(&eta) {
                return Err(unprocessable(format!("eta {eta} outside [0, 1]")));
            }
            Sampler::Ddim { eta }
        }
    };
    let mut masked = req.masked_regions.clone();
    masked.sort();
    masked.dedup();
    // Fits in a JavaScript number.
    let seed = req.seed.unwrap_or_else(|| rand::random::<u64>() >> 11);
    let opts = SynthesisOptions {
        steps,
        sampler,
        seed,
        masked_regions: masked.clone(),
    };
    let hash = request_hash(&sketch, &opts);
    let cache_key = req.seed.map(|_| format!("{hash}:{}", model.identity()));
    let record = JobRecord {
        id: String::new(),
        state: JobState::Queued,
        request_hash: hash,
        cache_hit: false,
        sampler: sampler.name().to_string(),
        eta: match sampler {
            Sampler::Ddim { eta } => Some(eta),
            Sampler::Ddpm => None,
        },
        seed,
        steps,
        masked_regions: masked,
        result_png: None,
        error: None,
        timings: Timings::default(),
    };
    let rec = {
        let mut store = state.store();
        let hit = cache_key.as_ref().and_then(|k| store.cached(k));
        if hit.is_none() && store.queue_depth() >= state.config.queue_len {
            return Err(ApiError(StatusCode::SERVICE_UNAVAILABLE, "job queue is full".into()));
        }
        store.submit(record, sketch, opts, cache_key, hit)
    };
    if !rec.cache_hit {
        state.wake.notify_one();
    }
    Ok((StatusCode::ACCEPTED, Json(rec)).into_response())
}

/// Loads the configured checkpoint, if any, and serves until the process
/// is stopped.
pub async fn serve(config: ServiceConfig) -> sgldm::Result<()> {
    let model = match &config.checkpoint {
        Some(p) => Some(Synthesizer::load(p)?),
        None => None,
    };
    match &model {
        Some(m) => log::info!("serving {} at canvas {}", m.identity(), m.canvas()),
        None => log::warn!("no checkpoint configured; jobs will be refused"),
    }
    let bind = config.bind;
    let app = start(AppState::new(config, model));
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app).await?;
    Ok(())
}
