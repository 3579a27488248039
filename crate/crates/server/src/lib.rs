//! HTTP front end: record and batch ingestion, schema lookup, dataset
//! catalog and series queries. Every route needs a bearer token.

mod client;

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::Serialize;
use tokio::sync::oneshot;

pub use client::HttpEndpoint;

use fabric_core::access::{verify_token, AccessError, AccessLayer, AccessToken, QueryRequest};
use fabric_core::gateway::{
    parse_batch_manifest, ArchiveSource, BatchSource, Gateway, GatewayError, Record, SubmitOutcome,
};
use fabric_core::model::Schema;
use fabric_core::time::Clock;
use fabric_core::Fabric;

/// Batch archives above this size are refused.
pub const MAX_BODY_BYTES: usize = 256 * 1024 * 1024;

pub struct ServerConfig {
    /// Environment whose scope an ingest token must hold.
    pub environment: String,
    pub key: Vec<u8>,
}

struct Shared {
    fabric: Arc<Fabric>,
    config: ServerConfig,
    clock: Arc<dyn Clock>,
}

#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    pub fn new(fabric: Arc<Fabric>, config: ServerConfig, clock: Arc<dyn Clock>) -> Self {
        AppState(Arc::new(Shared { fabric, config, clock }))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: String,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code: code.to_string(),
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "STORAGE_IO", message)
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: ErrorDetail<'a>,
}

#[derive(Serialize)]
struct ErrorDetail<'a> {
    code: &'a str,
    message: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: ErrorDetail {
                code: &self.code,
                message: &self.message,
            },
        };
        json_response(self.status, &body)
    }
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        let status = match &e {
            GatewayError::SchemaNotFound(_) => StatusCode::NOT_FOUND,
            GatewayError::MalformedEnvelope(_)
            | GatewayError::ChecksumMismatch { .. }
            | GatewayError::MalformedManifest(_)
            | GatewayError::MissingFile(_) => StatusCode::BAD_REQUEST,
            GatewayError::Store(s) if !s.is_io() => StatusCode::BAD_REQUEST,
            GatewayError::Io(_) | GatewayError::Store(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.code(), e.to_string())
    }
}

impl From<AccessError> for ApiError {
    fn from(e: AccessError) -> Self {
        let status = match &e {
            AccessError::Unauthorized(_) => StatusCode::UNAUTHORIZED,
            AccessError::UnknownDataset(_) => StatusCode::NOT_FOUND,
            AccessError::AmbiguousDataset(_) | AccessError::UnknownField(_) | AccessError::BadRange { .. } => {
                StatusCode::BAD_REQUEST
            }
            AccessError::Storage(_) | AccessError::Corrupt(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.code(), e.to_string())
    }
}

fn json_response<T: Serialize>(status: StatusCode, body: &T) -> Response {
    match serde_json::to_vec(body) {
        Ok(bytes) => (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

fn authorize(state: &AppState, headers: &HeaderMap) -> Result<AccessToken, ApiError> {
    let unauthorized = |m: &str| ApiError::new(StatusCode::UNAUTHORIZED, "UNAUTHORIZED", m);
    let value = headers
        .get(header::AUTHORIZATION)
        .ok_or_else(|| unauthorized("missing Authorization header"))?
        .to_str()
        .map_err(|_| unauthorized("Authorization header is not text"))?;
    let token = value
        .strip_prefix("Bearer ")
        .ok_or_else(|| unauthorized("expected a Bearer token"))?;
    verify_token(token, &state.0.config.key, state.0.clock.now()).map_err(|e| unauthorized(&e.to_string()))
}

fn require_ingest_scope(state: &AppState, token: &AccessToken, study_id: &str) -> Result<(), ApiError> {
    let environment = &state.0.config.environment;
    if token.covers(environment, study_id) {
        Ok(())
    } else {
        Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "FORBIDDEN",
            format!("token does not cover study `{study_id}` in environment `{environment}`"),
        ))
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("handler failed: {e}")))?
}

async fn post_record(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let token = authorize(&state, &headers)?;
    let record = Record::from_json(&body)?;
    require_ingest_scope(&state, &token, &record.study_id)?;
    let outcome = blocking(move || {
        let gateway = Gateway::new(&state.0.fabric, &*state.0.clock);
        Ok(gateway.submit_realtime(&record)?)
    })
    .await?;
    let status = match outcome {
        SubmitOutcome::Accepted { .. } => StatusCode::CREATED,
        SubmitOutcome::Duplicate { .. } => StatusCode::OK,
        SubmitOutcome::Rejected { .. } => StatusCode::UNPROCESSABLE_ENTITY,
    };
    Ok(json_response(status, &outcome))
}

/// Body: a tar archive holding `batch.json` and the files it names.
async fn post_batch(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let token = authorize(&state, &headers)?;
    let report = blocking(move || {
        let source = ArchiveSource::from_tar(&body).map_err(|e| {
            ApiError::new(
                StatusCode::BAD_REQUEST,
                "MALFORMED_MANIFEST",
                format!("body is not a tar archive: {e}"),
            )
        })?;
        // Every readable record must fall inside the token's scope before any is stored.
        if let Some(manifest) = source
            .read("batch.json")
            .map_err(|e| ApiError::internal(e.to_string()))?
        {
            for entry in parse_batch_manifest(&manifest).unwrap_or_default() {
                let bytes = source
                    .read(&entry.record_file)
                    .map_err(|e| ApiError::internal(e.to_string()))?;
                if let Some(record) = bytes.and_then(|b| Record::from_json(&b).ok()) {
                    require_ingest_scope(&state, &token, &record.study_id)?;
                }
            }
        }
        let gateway = Gateway::new(&state.0.fabric, &*state.0.clock);
        Ok(gateway.submit_batch(&source)?)
    })
    .await?;
    Ok(json_response(StatusCode::OK, &report))
}

async fn get_schema(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(task_id): Path<String>,
) -> Result<Response, ApiError> {
    authorize(&state, &headers)?;
    let schema = state
        .0
        .fabric
        .schemas
        .cide_for_task(&task_id)
        .ok_or_else(|| ApiError::from(GatewayError::SchemaNotFound(task_id)))?;
    Ok((
        StatusCode::OK,
        [(header::CONTENT_TYPE, "application/json")],
        Schema::Cide(schema).to_document(),
    )
        .into_response())
}

async fn get_datasets(State(state): State<AppState>, headers: HeaderMap) -> Result<Response, ApiError> {
    let token = authorize(&state, &headers)?;
    let catalog = blocking(move || Ok(AccessLayer::new(&state.0.fabric.store).list_datasets(&token)?)).await?;
    Ok(json_response(StatusCode::OK, &catalog))
}

async fn post_query(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let token = authorize(&state, &headers)?;
    let request: QueryRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "MALFORMED_REQUEST", e.to_string()))?;
    let series = blocking(move || Ok(AccessLayer::new(&state.0.fabric.store).query_series(&token, &request)?)).await?;
    Ok(json_response(StatusCode::OK, &series))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/v1/records", post(post_record))
        .route("/api/v1/batches", post(post_batch))
        .route("/api/v1/schemas/{task_id}", get(get_schema))
        .route("/api/v1/datasets", get(get_datasets))
        .route("/api/v1/query", post(post_query))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

/// Serves until the process ends.
pub fn serve_forever(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        tracing::info!(addr = %listener.local_addr()?, "serving");
        axum::serve(listener, router(state)).await
    })
}

/// A server on a background thread, stopped on drop.
pub struct RunningServer {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl RunningServer {
    pub fn start(addr: SocketAddr, state: AppState) -> std::io::Result<RunningServer> {
        let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        let listener = runtime.block_on(tokio::net::TcpListener::bind(addr))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel();
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                axum::serve(listener, router(state))
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
            })
        });
        Ok(RunningServer {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(thread) = self.thread.take() {
            let _ = thread.join();
        }
    }
}
