//! HTTP inference service over one frozen checkpoint.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::body::{to_bytes, Body};
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use log::info;
use promptpaint::checkpoint::SCHEMA_VERSION;
use promptpaint::imageio::{decode_mask, decode_rgb, encode_png_rgb, resize_bilinear};
use promptpaint::maskgen::Mask;
use promptpaint::sampler::{
    InpaintRequest, Mode, ObjectNegative, Pipeline, RequestEcho, SamplerKind, DEFAULT_STEPS,
};
use promptpaint::textcond::caption_grammar;
use promptpaint::Error;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::{OwnedSemaphorePermit, Semaphore};

pub const ENV_BIND: &str = "PROMPTPAINT_BIND";
pub const ENV_CHECKPOINT: &str = "PROMPTPAINT_CHECKPOINT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub checkpoint: PathBuf,
    pub max_concurrent: usize,
    pub max_body_bytes: usize,
    pub default_steps: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: ([127, 0, 0, 1], 8080).into(),
            checkpoint: PathBuf::from("artifacts/checkpoint"),
            max_concurrent: 2,
            max_body_bytes: 1 << 20,
            default_steps: DEFAULT_STEPS,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> promptpaint::Result<()> {
        if self.max_concurrent == 0 || self.max_body_bytes == 0 || self.default_steps == 0 {
            return Err(Error::Config("service limits must be positive".into()));
        }
        Ok(())
    }
}

pub struct AppState {
    pub config: ServiceConfig,
    pub pipeline: Pipeline,
    permits: Arc<Semaphore>,
}

impl AppState {
    pub fn new(config: ServiceConfig, pipeline: Pipeline) -> promptpaint::Result<Arc<Self>> {
        config.validate()?;
        Ok(Arc::new(Self {
            permits: Arc::new(Semaphore::new(config.max_concurrent)),
            config,
            pipeline,
        }))
    }

    /// A free inference slot, or `None` when all are taken.
    pub fn try_slot(&self) -> Option<OwnedSemaphorePermit> {
        self.permits.clone().try_acquire_owned().ok()
    }

    /// Loads the checkpoint named in the config.
    pub fn load(config: ServiceConfig) -> promptpaint::Result<Arc<Self>> {
        let pipeline = Pipeline::load(&config.checkpoint)?;
        Self::new(config, pipeline)
    }
}

/// Wire form of an inpainting request. Images are base64 PNG.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InpaintBody {
    pub image: String,
    pub mask: String,
    pub mode: Mode,
    pub caption: Option<String>,
    pub alpha: Option<f64>,
    pub w: Option<f64>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub negative: Option<ObjectNegative>,
    pub sampler: Option<SamplerKind>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResponseMetadata {
    pub request: RequestEcho,
    pub checkpoint_id: String,
    pub elapsed_ms: f64,
    /// The input was resampled to the model resolution; the output is at
    /// model resolution.
    pub resampled: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InpaintResponse {
    pub image: String,
    pub metadata: ResponseMetadata,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub field: Option<String>,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            field: None,
            message: message.into(),
        }
    }

    fn field(status: StatusCode, field: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            field: Some(field.into()),
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Request { field, message } => Self::field(StatusCode::UNPROCESSABLE_ENTITY, &field, message),
            Error::Mask(m) | Error::Prompt(m) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, m),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(f) = self.field {
            body["field"] = json!(f);
        }
        (self.status, Json(body)).into_response()
    }
}

fn decode_b64(field: &str, text: &str) -> Result<Vec<u8>, ApiError> {
    STANDARD
        .decode(text.trim())
        .map_err(|e| ApiError::field(StatusCode::BAD_REQUEST, field, format!("invalid base64: {e}")))
}

fn nearest_mask(m: &Mask, size: usize) -> Mask {
    let (h, w) = (m.height(), m.width());
    Mask::from_fn(size, size, |y, x| m.get(y * h / size, x * w / size))
}

/// Parses and decodes a request body into a library request. Returns
/// whether the inputs had to be resampled.
pub fn decode_request(body: &[u8], size: usize) -> Result<(InpaintRequest, bool), ApiError> {
    let parsed: InpaintBody = serde_json::from_slice(body).map_err(|e| {
        let status = if e.is_data() {
            StatusCode::UNPROCESSABLE_ENTITY
        } else {
            StatusCode::BAD_REQUEST
        };
        ApiError::new(status, format!("request body: {e}"))
    })?;
    let image = decode_rgb(&decode_b64("image", &parsed.image)?)
        .map_err(|e| ApiError::field(StatusCode::BAD_REQUEST, "image", format!("not a decodable PNG: {e}")))?;
    let mask = decode_mask(&decode_b64("mask", &parsed.mask)?)
        .map_err(|e| ApiError::field(StatusCode::BAD_REQUEST, "mask", format!("not a decodable PNG: {e}")))?;
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if mask.height() != h || mask.width() != w {
        return Err(ApiError::field(
            StatusCode::UNPROCESSABLE_ENTITY,
            "mask",
            format!("mask is {}x{}, image is {h}x{w}", mask.height(), mask.width()),
        ));
    }
    let resampled = h != size || w != size;
    let (image, mask) = if resampled {
        (resize_bilinear(&image, size, size).map_err(ApiError::from)?, nearest_mask(&mask, size))
    } else {
        (image, mask)
    };
    let req = InpaintRequest {
        image,
        mask,
        mode: parsed.mode,
        caption: parsed.caption,
        alpha: parsed.alpha,
        w: parsed.w,
        steps: parsed.steps,
        seed: parsed.seed.unwrap_or(0),
        negative: parsed.negative,
        sampler: parsed.sampler,
    };
    Ok((req, resampled))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "checkpoint_id": state.pipeline.checkpoint_id,
        "schema_version": SCHEMA_VERSION,
    }))
}

async fn tasks(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let modes: Vec<_> = Mode::ALL
        .iter()
        .map(|m| {
            json!({
                "mode": m,
                "caption": m.takes_caption(),
                "alpha": m.takes_alpha(),
                "default_w": m.default_w(),
                "negative": if *m == Mode::Object { json!(["empty", "p_ctxt"]) } else { json!(null) },
            })
        })
        .collect();
    let grammar: Vec<String> = caption_grammar().into_iter().filter(|c| !c.is_empty()).collect();
    Json(json!({
        "modes": modes,
        "captions": grammar,
        "image_size": state.pipeline.image_size(),
        "ranges": {
            "alpha": [0.0, 1.0],
            "w": { "min": 0.0 },
            "steps": [1, state.pipeline.schedule.len()],
            "seed": [0, u64::MAX],
        },
        "defaults": { "steps": state.config.default_steps, "seed": 0, "sampler": SamplerKind::default() },
        "samplers": ["ddim", "ancestral"],
        "vocabulary": state.pipeline.model.vocab,
    }))
}

async fn inpaint(State(state): State<Arc<AppState>>, body: Body) -> Result<Json<InpaintResponse>, ApiError> {
    let limit = state.config.max_body_bytes;
    let bytes = to_bytes(body, limit).await.map_err(|_| {
        ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("request body exceeds the configured limit of {limit} bytes"),
        )
    })?;
    let permit = state.try_slot().ok_or_else(|| {
        ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            format!("all {} inference slots are busy", state.config.max_concurrent),
        )
    })?;
    let worker = state.clone();
    let out = tokio::task::spawn_blocking(move || -> Result<InpaintResponse, ApiError> {
        let _permit = permit;
        let started = Instant::now();
        let (mut req, resampled) = decode_request(&bytes, worker.pipeline.image_size())?;
        req.steps = req.steps.or(Some(worker.config.default_steps));
        let result = worker.pipeline.inpaint(&req)?;
        let png = encode_png_rgb(&result.image).map_err(ApiError::from)?;
        Ok(InpaintResponse {
            image: STANDARD.encode(png),
            metadata: ResponseMetadata {
                request: result.metadata.request,
                checkpoint_id: result.metadata.checkpoint_id,
                elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
                resampled,
            },
        })
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))??;
    Ok(Json(out))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/tasks", get(tasks))
        .route("/inpaint", post(inpaint))
        .layer(DefaultBodyLimit::disable())
        .with_state(state)
}

/// Binds the configured address and serves until ctrl-c.
pub async fn serve(state: Arc<AppState>) -> anyhow::Result<()> {
    let listener = TcpListener::bind(state.config.bind).await?;
    serve_on(listener, state, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}

/// Serves on an already bound listener until `shutdown` resolves; in-flight
/// requests complete before returning.
pub async fn serve_on(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> anyhow::Result<()> {
    info!(
        "serving checkpoint {} on http://{}",
        state.pipeline.checkpoint_id,
        listener.local_addr()?
    );
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async move {
            shutdown.await;
            info!("shutting down");
        })
        .await?;
    Ok(())
}
