//! HTTP JSON API.
//!
//! | route            | behavior                                              |
//! |------------------|-------------------------------------------------------|
//! | `GET /health`    | `{"status":"ok","version":...}`                       |
//! | `GET /models`    | model list proxied from the sidecar                   |
//! | `POST /analyze`  | JSON `AnalysisRequest`, or multipart upload           |
//! | `GET /ui/*`      | static files, when a UI directory is configured       |
//!
//! Multipart uploads carry three parts: `request` (the JSON request, whose
//! `source` is ignored), `dump` (container bytes) and `tokens` (the
//! `.tokens.json` bytes).
//!
//! Dumps named by path are kept in an LRU keyed by canonical path, size and
//! modification time, so an edited file is never served stale. The cache
//! holds at most `cache_size` bundles (default 8).

use std::net::SocketAddr;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::SystemTime;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use hiddenscope_core::{DumpBundle, ErrorKind};
use lru::LruCache;
use serde_json::json;
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

use crate::error::ServiceError;
use crate::pipeline::{extract_bundle, load_calibration, load_dump, load_upload};
use crate::report::{analyze, AnalysisRequest, Source};
use crate::sidecar::SidecarClient;

pub const DEFAULT_CACHE_SIZE: usize = 8;
pub const MAX_UPLOAD_BYTES: usize = 1 << 30;
const RETRY_AFTER_SECS: &str = "30";

type CacheKey = (PathBuf, u64, Option<SystemTime>);

pub struct AppState {
    sidecar: Option<Arc<SidecarClient>>,
    cache: Mutex<LruCache<CacheKey, Arc<DumpBundle>>>,
}

impl AppState {
    pub fn new(sidecar: Option<SidecarClient>, cache_size: usize) -> Self {
        let cap = NonZeroUsize::new(cache_size.max(1)).expect("nonzero");
        Self {
            sidecar: sidecar.map(Arc::new),
            cache: Mutex::new(LruCache::new(cap)),
        }
    }

    fn cached_dump(&self, path: &Path) -> Result<Arc<DumpBundle>, ServiceError> {
        let key = std::fs::canonicalize(path)
            .and_then(|p| std::fs::metadata(&p).map(|m| (p, m.len(), m.modified().ok())))
            .map_err(|e| ServiceError::Dump {
                path: path.display().to_string(),
                source: e.into(),
            })?;
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let bundle = Arc::new(load_dump(path)?);
        self.cache.lock().expect("cache lock").put(key, bundle.clone());
        Ok(bundle)
    }
}

fn json_body(status: StatusCode, body: String) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json; charset=utf-8")], body).into_response()
}

struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self.0 {
            ServiceError::Request(_) => (StatusCode::BAD_REQUEST, "invalid"),
            ServiceError::Core(e) | ServiceError::Dump { source: e, .. } => match e.kind() {
                ErrorKind::Invalid => (StatusCode::BAD_REQUEST, "invalid"),
                ErrorKind::Numerical => (StatusCode::UNPROCESSABLE_ENTITY, "numerical"),
            },
            ServiceError::Unavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "unavailable"),
            ServiceError::Extraction(_) => (StatusCode::BAD_GATEWAY, "extraction"),
            ServiceError::Protocol(_) => (StatusCode::BAD_GATEWAY, "protocol"),
        };
        let body = json!({ "error": { "kind": kind, "message": self.0.to_string() } }).to_string();
        let mut resp = json_body(status, body);
        if status == StatusCode::SERVICE_UNAVAILABLE {
            resp.headers_mut()
                .insert(header::RETRY_AFTER, HeaderValue::from_static(RETRY_AFTER_SECS));
        }
        resp
    }
}

async fn health() -> Response {
    json_body(
        StatusCode::OK,
        json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }).to_string(),
    )
}

fn require_sidecar(state: &AppState) -> Result<Arc<SidecarClient>, ServiceError> {
    state
        .sidecar
        .clone()
        .ok_or_else(|| ServiceError::Unavailable("no extractor configured".into()))
}

async fn models(State(state): State<Arc<AppState>>) -> Result<Response, ApiError> {
    let models = require_sidecar(&state)?.models().await?;
    Ok(json_body(StatusCode::OK, json!({ "models": models }).to_string()))
}

fn parse_request(bytes: &[u8]) -> Result<AnalysisRequest, ServiceError> {
    let req: AnalysisRequest = serde_json::from_slice(bytes)
        .map_err(|e| ServiceError::Request(format!("malformed analysis request: {e}")))?;
    req.normalized()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> T {
    tokio::task::spawn_blocking(f).await.expect("analysis task panicked")
}

async fn read_multipart(mut mp: Multipart) -> Result<(AnalysisRequest, Vec<u8>, Vec<u8>), ServiceError> {
    let bad = |m: String| ServiceError::Request(m);
    let (mut request, mut dump, mut tokens) = (None, None, None);
    while let Some(field) = mp
        .next_field()
        .await
        .map_err(|e| bad(format!("malformed multipart body: {e}")))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let data = field
            .bytes()
            .await
            .map_err(|e| bad(format!("reading part {name:?}: {e}")))?;
        match name.as_str() {
            "request" => request = Some(parse_request(&data)?),
            "dump" => dump = Some(data.to_vec()),
            "tokens" => tokens = Some(data.to_vec()),
            other => return Err(bad(format!("unexpected multipart part {other:?}"))),
        }
    }
    match (request, dump, tokens) {
        (Some(r), Some(d), Some(t)) => Ok((r, d, t)),
        _ => Err(bad("multipart upload needs parts request, dump and tokens".into())),
    }
}

async fn analyze_handler(State(state): State<Arc<AppState>>, req: Request) -> Result<Response, ApiError> {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));

    let (request, bundle) = if is_multipart {
        let mp = Multipart::from_request(req, &state)
            .await
            .map_err(|e| ServiceError::Request(e.body_text()))?;
        let (request, dump, tokens) = read_multipart(mp).await?;
        let bundle = blocking(move || load_upload(dump, &tokens)).await?;
        (request, Arc::new(bundle))
    } else {
        let bytes = Bytes::from_request(req, &state)
            .await
            .map_err(|e| ServiceError::Request(e.body_text()))?;
        let request = parse_request(&bytes)?;
        let bundle = match &request.source {
            None => return Err(ServiceError::Request("request has no source".into()).into()),
            Some(Source::Dump { dump_path }) => {
                let (state, path) = (state.clone(), PathBuf::from(dump_path));
                blocking(move || state.cached_dump(&path)).await?
            }
            Some(Source::Text { model_id, text }) => {
                let client = require_sidecar(&state)?;
                Arc::new(extract_bundle(&client, model_id, text, &request.ops).await?)
            }
        };
        (request, bundle)
    };

    let report = blocking(move || {
        let calibration = load_calibration(&request)?;
        Ok::<_, ServiceError>(analyze(&bundle, &request, &calibration))
    })
    .await?;
    Ok(json_body(StatusCode::OK, report.render()))
}

pub fn router(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let mut app = Router::new()
        .route("/health", get(health))
        .route("/models", get(models))
        .route("/analyze", post(analyze_handler))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES));
    if let Some(dir) = ui_dir {
        app = app.nest_service("/ui", ServeDir::new(dir));
    }
    app.with_state(state)
}

/// Serves until the process receives Ctrl-C.
pub async fn serve(listener: TcpListener, app: Router) -> std::io::Result<()> {
    let addr: SocketAddr = listener.local_addr()?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
