//! Local render service for interactive posing of a trained avatar.
//!
//! * `GET /api/info`: avatar metadata (JSON).
//! * `POST /api/render`: one PNG frame for a pose/camera/PCA request.
//! * `WS /api/stream`: JSON control messages up, binary frames down.
//!
//! Message schemas are documented in `PROTOCOL.md` next to this crate.

pub mod avatar;
pub mod stream;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::AtomicU64;
use std::sync::{Arc, OnceLock};

use axum::body::Bytes;
use axum::extract::{State, WebSocketUpgrade};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};

pub use avatar::{Avatar, RenderRequest, RequestError};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] splatavatar::Error),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("server error: {0}")]
    Server(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub checkpoint: PathBuf,
    pub addr: SocketAddr,
    pub dataset: Option<PathBuf>,
}

/// Shared state. The avatar is set once loading finishes; requests before
/// that get 503.
#[derive(Default)]
pub struct AppState {
    avatar: OnceLock<Arc<Avatar>>,
    load_error: OnceLock<String>,
    /// Frames rendered by stream workers, for observing session disposal.
    pub renders: AtomicU64,
    /// Open stream sessions.
    pub sessions: AtomicU64,
}

impl AppState {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn with_avatar(avatar: Avatar) -> Arc<Self> {
        let s = Self::new();
        s.set_avatar(avatar);
        s
    }

    pub fn set_avatar(&self, avatar: Avatar) {
        let _ = self.avatar.set(Arc::new(avatar));
    }

    pub fn set_load_error(&self, message: String) {
        let _ = self.load_error.set(message);
    }

    pub fn avatar(&self) -> Option<Arc<Avatar>> {
        self.avatar.get().cloned()
    }
}

fn error_response(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": message.into() }))).into_response()
}

fn not_loaded(state: &AppState) -> Response {
    let msg = match state.load_error.get() {
        Some(e) => format!("checkpoint failed to load: {e}"),
        None => "checkpoint is still loading".to_string(),
    };
    error_response(StatusCode::SERVICE_UNAVAILABLE, msg)
}

async fn info(State(state): State<Arc<AppState>>) -> Response {
    match state.avatar() {
        Some(a) => Json(a.info()).into_response(),
        None => not_loaded(&state),
    }
}

async fn render(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let Some(avatar) = state.avatar() else {
        return not_loaded(&state);
    };
    let req: RenderRequest = match avatar::parse_json(&body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let resolved = match avatar.resolve(&req) {
        Ok(r) => r,
        Err(RequestError::Malformed(m)) => return error_response(StatusCode::BAD_REQUEST, m),
        Err(RequestError::NonFinite(m)) => return error_response(StatusCode::UNPROCESSABLE_ENTITY, m),
    };
    let result = tokio::task::spawn_blocking(move || avatar.render(&resolved)).await;
    match result {
        Ok(Ok((times, png))) => {
            let mut resp = (StatusCode::OK, png).into_response();
            let h = resp.headers_mut();
            h.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
            for (name, v) in [
                ("x-coefficients-ms", times.coefficients_ms),
                ("x-blend-lbs-ms", times.blend_lbs_ms),
                ("x-rasterize-ms", times.rasterize_ms),
            ] {
                if let Ok(value) = HeaderValue::from_str(&format!("{v:.4}")) {
                    h.insert(name, value);
                }
            }
            resp
        }
        Ok(Err(e)) => error_response(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn stream_upgrade(State(state): State<Arc<AppState>>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| stream::session(socket, state))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/info", get(info))
        .route("/api/render", post(render))
        .route("/api/stream", get(stream_upgrade))
        .with_state(state)
}

/// Binds, starts loading the checkpoint in the background and serves until
/// the process is stopped.
pub async fn serve(options: ServeOptions) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(options.addr)
        .await
        .map_err(|source| ServiceError::Bind {
            addr: options.addr,
            source,
        })?;
    let state = AppState::new();
    let loader = state.clone();
    tokio::task::spawn_blocking(move || match Avatar::load(&options.checkpoint, options.dataset.as_deref()) {
        Ok(a) => {
            log::info!("loaded {} ({} Gaussians)", a.name, a.model.gaussian_count());
            loader.set_avatar(a);
        }
        Err(e) => {
            log::error!("checkpoint failed to load: {e}");
            loader.set_load_error(e.to_string());
        }
    });
    log::warn!("listening on http://{}", options.addr);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

pub fn run_blocking(options: ServeOptions) -> Result<(), ServiceError> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(serve(options))
}
