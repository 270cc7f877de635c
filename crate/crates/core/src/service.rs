//! HTTP service for interactive editing: load a checkpoint, upload tiles,
//! request edited translations.

use std::collections::{HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::{OwnedRwLockReadGuard, RwLock};

use crate::color::{lab_to_rgb, LabImage};
use crate::error::{Error, Result};
use crate::imageio;
use crate::netcore::{Direction, Generator};
use crate::sefa::{edited_generate, generator_basis, EditParams, Eigenbasis};
use crate::tensor::Tensor;
use crate::trainer::TrainState;

const MAX_UPLOADS: usize = 256;
const MAX_BODY: usize = 32 << 20;

/// Generators of a checkpoint plus their cached edit bases.
pub struct LoadedModel {
    pub path: PathBuf,
    pub step: u64,
    pub he2p63: Generator<f32>,
    pub p632he: Generator<f32>,
    pub basis_he2p63: Eigenbasis,
    pub basis_p632he: Eigenbasis,
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self> {
        let st = TrainState::load(path)?;
        let m = st.models;
        Ok(LoadedModel {
            path: path.to_path_buf(),
            step: st.step,
            basis_he2p63: generator_basis(&m.he2p63)?,
            basis_p632he: generator_basis(&m.p632he)?,
            he2p63: m.he2p63,
            p632he: m.p632he,
        })
    }

    pub fn image_px(&self) -> usize {
        self.he2p63.config().image_px
    }

    pub fn generator(&self, d: Direction) -> &Generator<f32> {
        match d {
            Direction::HeToP63 => &self.he2p63,
            Direction::P63ToHe => &self.p632he,
        }
    }

    pub fn basis(&self, d: Direction) -> &Eigenbasis {
        match d {
            Direction::HeToP63 => &self.basis_he2p63,
            Direction::P63ToHe => &self.basis_p632he,
        }
    }

    /// sha256 over both generators' parameters.
    pub fn weight_checksum(&self) -> String {
        let mut h = Sha256::new();
        for g in [&self.he2p63, &self.p632he] {
            for t in g.params().tensors() {
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    /// Edited translation of one tile, returned as an 8-bit sRGB PNG.
    pub fn render(&self, tile: &LabImage, params: &EditParams) -> Result<Vec<u8>> {
        let px = self.image_px();
        if tile.width != px || tile.height != px {
            return Err(Error::Shape(format!(
                "tile is {}×{}, the model expects {px}×{px}",
                tile.width, tile.height
            )));
        }
        let d = params.direction;
        let x = Tensor::from_vec(&[1, 3, px, px], tile.to_planar())?;
        let out = edited_generate(self.generator(d), self.basis(d), params, &x, None)?;
        let lab = LabImage::from_planar(px, px, out.output.data())?;
        imageio::encode_rgb(&lab_to_rgb(&lab)?)
    }
}

#[derive(Default)]
struct Uploads {
    images: HashMap<String, Arc<LabImage>>,
    order: VecDeque<String>,
}

#[derive(Clone)]
pub struct AppState {
    model: Arc<RwLock<Option<Arc<LoadedModel>>>>,
    uploads: Arc<Mutex<Uploads>>,
    last_edit: Arc<Mutex<Option<EditParams>>>,
}

impl Default for AppState {
    fn default() -> Self {
        Self::new()
    }
}

impl AppState {
    pub fn new() -> Self {
        AppState {
            model: Arc::new(RwLock::new(None)),
            uploads: Arc::default(),
            last_edit: Arc::default(),
        }
    }

    pub fn with_model(model: LoadedModel) -> Self {
        let s = Self::new();
        *s.model.try_write().expect("fresh lock") = Some(Arc::new(model));
        s
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            kind,
            message: message.into(),
        }
    }

    fn no_model() -> Self {
        Self::new(StatusCode::CONFLICT, "no_model", "no model is loaded; POST /model first")
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, kind) = match &e {
            Error::Validation(_) | Error::UnknownPairing(_) => (StatusCode::UNPROCESSABLE_ENTITY, "validation"),
            Error::Shape(_) => (StatusCode::UNPROCESSABLE_ENTITY, "shape"),
            Error::Codec(_) => (StatusCode::BAD_REQUEST, "codec"),
            Error::Io { .. } => (StatusCode::BAD_REQUEST, "io"),
            Error::Integrity(_) => (StatusCode::BAD_REQUEST, "integrity"),
            Error::Version { .. } => (StatusCode::BAD_REQUEST, "version"),
            Error::StaleBasis { .. } => (StatusCode::CONFLICT, "stale_basis"),
            Error::Corpus(_) | Error::Numeric(_) | Error::Divergence { .. } => {
                (StatusCode::INTERNAL_SERVER_ERROR, "internal")
            }
        };
        ApiError::new(status, kind, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", r.body_text())
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: ErrorDetail<'a>,
}

#[derive(Serialize)]
struct ErrorDetail<'a> {
    kind: &'a str,
    message: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: ErrorDetail {
                kind: self.kind,
                message: &self.message,
            },
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelRequest {
    pub path: PathBuf,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelSummary {
    pub path: PathBuf,
    pub step: u64,
    pub image_px: usize,
    pub latent_channels: usize,
    pub basis: BasisResponse,
    pub fingerprints: HashMap<Direction, String>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct BasisResponse {
    pub he2p63: Vec<f64>,
    pub p632he: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UploadResponse {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformRequest {
    pub image_id: String,
    pub direction: Direction,
    pub j: usize,
    pub k: usize,
    pub m: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TransformResponse {
    pub png_base64: String,
    pub ms: f64,
    pub image_id: String,
    pub direction: Direction,
    pub j: usize,
    pub k: usize,
    pub m: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_loaded: bool,
    pub checkpoint: Option<PathBuf>,
    pub weights_sha256: Option<String>,
    pub uploads: usize,
    pub last_edit: Option<EditParams>,
}

fn summary(m: &LoadedModel) -> ModelSummary {
    ModelSummary {
        path: m.path.clone(),
        step: m.step,
        image_px: m.image_px(),
        latent_channels: m.basis_he2p63.channels,
        basis: basis_of(m),
        fingerprints: Direction::ALL.iter().map(|&d| (d, m.basis(d).fingerprint.clone())).collect(),
    }
}

fn basis_of(m: &LoadedModel) -> BasisResponse {
    BasisResponse {
        he2p63: m.basis_he2p63.sigmas.clone(),
        p632he: m.basis_p632he.sigmas.clone(),
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> std::result::Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

async fn load_model(State(s): State<AppState>, req: std::result::Result<Json<ModelRequest>, JsonRejection>) -> ApiResult<ModelSummary> {
    let Json(req) = req?;
    let mut guard = s
        .model
        .clone()
        .try_write_owned()
        .map_err(|_| ApiError::new(StatusCode::CONFLICT, "busy", "a model load or transform is in progress"))?;
    let loaded = blocking(move || LoadedModel::load(&req.path)).await?;
    let out = summary(&loaded);
    *guard = Some(Arc::new(loaded));
    Ok(Json(out))
}

async fn upload(State(s): State<AppState>, body: axum::body::Bytes) -> ApiResult<UploadResponse> {
    let id = hex::encode(&Sha256::digest(&body)[..12]);
    if let Some(img) = s.uploads.lock().unwrap().images.get(&id) {
        return Ok(Json(UploadResponse {
            image_id: id,
            width: img.width,
            height: img.height,
        }));
    }
    let img = blocking(move || imageio::decode_as_lab(&body)).await?;
    let resp = UploadResponse {
        image_id: id.clone(),
        width: img.width,
        height: img.height,
    };
    let mut up = s.uploads.lock().unwrap();
    if !up.images.contains_key(&id) {
        if up.order.len() >= MAX_UPLOADS {
            if let Some(old) = up.order.pop_front() {
                up.images.remove(&old);
            }
        }
        up.order.push_back(id.clone());
        up.images.insert(id, Arc::new(img));
    }
    Ok(Json(resp))
}

async fn model_guard(s: &AppState) -> std::result::Result<OwnedRwLockReadGuard<Option<Arc<LoadedModel>>>, ApiError> {
    let guard = s.model.clone().read_owned().await;
    if guard.is_none() {
        return Err(ApiError::no_model());
    }
    Ok(guard)
}

async fn transform(State(s): State<AppState>, req: std::result::Result<Json<TransformRequest>, JsonRejection>) -> ApiResult<TransformResponse> {
    let Json(req) = req?;
    let guard = model_guard(&s).await?;
    let img = s
        .uploads
        .lock()
        .unwrap()
        .images
        .get(&req.image_id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("unknown image id `{}`", req.image_id)))?;
    let params = EditParams {
        direction: req.direction,
        j: req.j,
        k: req.k,
        m: req.m,
    };
    let started = Instant::now();
    let png = blocking(move || {
        let model = guard.as_ref().expect("checked above");
        model.render(&img, &params)
    })
    .await?;
    *s.last_edit.lock().unwrap() = Some(params);
    Ok(Json(TransformResponse {
        png_base64: base64::engine::general_purpose::STANDARD.encode(png),
        ms: started.elapsed().as_secs_f64() * 1e3,
        image_id: req.image_id,
        direction: params.direction,
        j: params.j,
        k: params.k,
        m: params.m,
    }))
}

async fn basis(State(s): State<AppState>) -> ApiResult<BasisResponse> {
    let guard = model_guard(&s).await?;
    Ok(Json(basis_of(guard.as_ref().expect("checked above"))))
}

async fn health(State(s): State<AppState>) -> Json<Health> {
    let (status, model) = match s.model.try_read() {
        Ok(g) => ("ok", g.clone()),
        Err(_) => ("busy", None),
    };
    Json(Health {
        status: status.into(),
        model_loaded: model.is_some(),
        checkpoint: model.as_ref().map(|m| m.path.clone()),
        weights_sha256: model.as_ref().map(|m| m.weight_checksum()),
        uploads: s.uploads.lock().unwrap().images.len(),
        last_edit: *s.last_edit.lock().unwrap(),
    })
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/model", post(load_model))
        .route("/images", post(upload))
        .route("/transform", post(transform))
        .route("/basis", get(basis))
        .route("/health", get(health))
        .layer(DefaultBodyLimit::max(MAX_BODY))
        .with_state(state)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: AppState, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn load_is_rejected_while_a_request_holds_the_model() {
        let s = AppState::new();
        let held = s.model.clone().read_owned().await;
        let req = Ok(Json(ModelRequest { path: "/nonexistent".into() }));
        let err = load_model(State(s.clone()), req).await.unwrap_err();
        assert_eq!(err.status, StatusCode::CONFLICT);
        assert_eq!(err.kind, "busy");
        drop(held);
        let req = Ok(Json(ModelRequest { path: "/nonexistent".into() }));
        let err = load_model(State(s.clone()), req).await.unwrap_err();
        assert_eq!(err.kind, "io");
        assert!(s.model.read().await.is_none());
    }
}
