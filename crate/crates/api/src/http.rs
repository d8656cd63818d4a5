// SPDX-License-Identifier: Apache-2.0

//! HTTP+JSON northbound interface.
//!
//! Slice mutations run on blocking threads and queue on the orchestrator's
//! configuration lock; reads only take short-lived state locks, so they are
//! served while a provision is in flight.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use qslice_core::device_sim::{DeviceError, FaultMode};
use qslice_core::kms::KmsError;
use qslice_core::orchestrator::timing::to_csv_string;
use qslice_core::orchestrator::{DescriptorError, SliceState};
use qslice_core::pce::{compute_path, ConnectionRequest, Policy};
use qslice_core::{Orchestrator, OrchestratorError, SliceDescriptor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;

use crate::config::ServiceConfig;
use crate::dataplane::{DataPlane, DataPlaneError};

#[derive(Clone)]
pub struct AppState {
    pub orch: Arc<Orchestrator>,
    pub dataplane: Arc<DataPlane>,
    pub test_endpoints: bool,
    pub bearer_token: Option<Arc<str>>,
}

impl AppState {
    pub fn new(orch: Arc<Orchestrator>, config: &ServiceConfig) -> Self {
        AppState {
            dataplane: Arc::new(DataPlane::new(orch.clone())),
            orch,
            test_endpoints: config.enable_test_endpoints,
            bearer_token: config.bearer_token.as_deref().map(Arc::from),
        }
    }
}

/// Error response: status plus `{"error": ..., "path": ...}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub path: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl ToString) -> Self {
        ApiError { status, message: message.to_string(), path: None }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(p) = self.path {
            body["path"] = p.into();
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<DescriptorError> for ApiError {
    fn from(e: DescriptorError) -> Self {
        let path = match &e {
            DescriptorError::Schema { path, .. } => path.clone(),
            DescriptorError::Invalid { field, .. } => field.clone(),
        };
        ApiError { status: StatusCode::BAD_REQUEST, message: e.to_string(), path: Some(path) }
    }
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        use OrchestratorError as E;
        let status = match &e {
            E::Descriptor(d) => return d.clone().into(),
            E::UnknownSlice(_) => StatusCode::NOT_FOUND,
            E::DuplicateSlice(_) | E::InvalidState { .. } => StatusCode::CONFLICT,
            E::Path(_) | E::InsufficientCompute { .. } | E::OperationFailed { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            E::Lock(_) => StatusCode::SERVICE_UNAVAILABLE,
            E::Device(DeviceError::UnknownDevice(_)) => StatusCode::NOT_FOUND,
            E::Device(_) | E::Kms(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e)
    }
}

impl From<KmsError> for ApiError {
    fn from(e: KmsError) -> Self {
        let status = match &e {
            KmsError::UnknownChannel(_) | KmsError::UnknownKey(_) | KmsError::UnknownChain(_) => StatusCode::NOT_FOUND,
            KmsError::NotEncrypted(_) => StatusCode::CONFLICT,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError::new(status, e)
    }
}

impl From<DataPlaneError> for ApiError {
    fn from(e: DataPlaneError) -> Self {
        match e {
            DataPlaneError::UnknownChannel(_) => ApiError::new(StatusCode::NOT_FOUND, e),
            DataPlaneError::Key(k) => k.into(),
            _ => ApiError::new(StatusCode::CONFLICT, e),
        }
    }
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| ApiError {
        status: StatusCode::BAD_REQUEST,
        message: e.inner().to_string(),
        path: Some(e.path().to_string()),
    })
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))
}

async fn health() -> &'static str {
    "ok"
}

async fn create_slice(State(st): State<AppState>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let text = std::str::from_utf8(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e))?;
    let desc = SliceDescriptor::from_json(text)?;
    let rec = st.orch.request_slice(desc)?;
    Ok((StatusCode::CREATED, Json(rec)))
}

async fn list_slices(State(st): State<AppState>) -> impl IntoResponse {
    Json(st.orch.slices())
}

async fn get_slice(State(st): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let rec = st.orch.slice(&id).ok_or(OrchestratorError::UnknownSlice(id))?;
    Ok(Json(rec))
}

#[derive(Debug, Default, Deserialize)]
struct ProvisionQuery {
    #[serde(default)]
    wait: bool,
}

/// Starts provisioning and answers 202 with the current record; with
/// `?wait=true` answers 200 with the final record.
async fn provision_slice(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<ProvisionQuery>,
) -> Result<Response, ApiError> {
    let rec = st.orch.slice(&id).ok_or_else(|| OrchestratorError::UnknownSlice(id.clone()))?;
    if rec.state != SliceState::Validated {
        return Err(OrchestratorError::InvalidState { slice_id: id, state: rec.state, operation: "provision" }.into());
    }
    let orch = st.orch.clone();
    let task_id = id.clone();
    let task = tokio::task::spawn_blocking(move || orch.provision_slice(&task_id));
    if q.wait {
        let rec = task.await.map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))??;
        return Ok((StatusCode::OK, Json(rec)).into_response());
    }
    tokio::spawn(async move {
        match task.await {
            Ok(Err(e)) => log::warn!("provision {id}: {e}"),
            Err(e) => log::error!("provision task: {e}"),
            Ok(Ok(_)) => {}
        }
    });
    Ok((StatusCode::ACCEPTED, Json(rec)).into_response())
}

async fn delete_slice(State(st): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let orch = st.orch.clone();
    let rec = blocking(move || orch.deprovision_slice(&id)).await??;
    Ok(Json(rec))
}

async fn audit_slice(State(st): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(st.orch.audit_slice(&id)?))
}

async fn slice_plan(State(st): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(st.orch.provision_plan(&id)?))
}

async fn topology(State(st): State<AppState>) -> impl IntoResponse {
    Json(st.orch.topology())
}

async fn timings_csv(State(st): State<AppState>) -> impl IntoResponse {
    ([(header::CONTENT_TYPE, "text/csv")], to_csv_string(&st.orch.timing_records()))
}

async fn channel_key_status(State(st): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(st.orch.kms().channel_status(&id)?))
}

async fn kms_status(State(st): State<AppState>) -> impl IntoResponse {
    Json(st.orch.kms().status())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WhatIf {
    #[serde(flatten)]
    request: ConnectionRequest,
    #[serde(default)]
    policy: Policy,
}

async fn pce_whatif(State(st): State<AppState>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let w: WhatIf = parse(&body)?;
    let topo = st.orch.topology();
    let path = compute_path(&topo, &w.request, w.policy).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e))?;
    Ok(Json(path))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultRequest {
    Inject { device_id: String, fault: FaultMode },
    Clear,
}

async fn faults(State(st): State<AppState>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    if !st.test_endpoints {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "test endpoints are disabled"));
    }
    match parse::<FaultRequest>(&body)? {
        FaultRequest::Inject { device_id, fault } => st.orch.inject_fault(&device_id, fault).map_err(|e| match e {
            DeviceError::UnknownDevice(_) => ApiError::new(StatusCode::NOT_FOUND, e),
            _ => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e),
        })?,
        FaultRequest::Clear => st.orch.clear_faults(),
    }
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SendRequest {
    pub channel_id: String,
    pub client_port: u8,
    /// UTF-8 payloads, one frame each.
    pub payloads: Vec<String>,
    /// Advance the key clock to this time before sending.
    #[serde(default)]
    pub at_s: Option<f64>,
}

async fn dataplane_send(State(st): State<AppState>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: SendRequest = parse(&body)?;
    let payloads: Vec<Vec<u8>> = req.payloads.into_iter().map(String::into_bytes).collect();
    let dp = st.dataplane.clone();
    let report = blocking(move || dp.send_frames(&req.channel_id, req.client_port, &payloads, req.at_s)).await??;
    Ok(Json(report))
}

async fn require_token(State(st): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &st.bearer_token {
        let expected = format!("Bearer {token}");
        let given = req.headers().get(header::AUTHORIZATION).and_then(|v| v.to_str().ok());
        if req.uri().path() != "/health" && given != Some(expected.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

pub fn router(state: AppState, cors_origin: Option<&str>) -> Router {
    let mut app = Router::new()
        .route("/health", get(health))
        .route("/slices", post(create_slice).get(list_slices))
        .route("/slices/{id}", get(get_slice).delete(delete_slice))
        .route("/slices/{id}/provision", post(provision_slice))
        .route("/slices/{id}/audit", get(audit_slice))
        .route("/slices/{id}/plan", get(slice_plan))
        .route("/topology", get(topology))
        .route("/metrics/timings.csv", get(timings_csv))
        .route("/keys/channel/{id}/status", get(channel_key_status))
        .route("/kms/status", get(kms_status))
        .route("/pce/whatif", post(pce_whatif))
        .route("/dataplane/send", post(dataplane_send))
        .route("/test/faults", post(faults))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state);
    if let Some(origin) = cors_origin.and_then(|o| HeaderValue::from_str(o).ok()) {
        app = app.layer(
            CorsLayer::new()
                .allow_origin(origin)
                .allow_methods([Method::GET, Method::POST, Method::DELETE])
                .allow_headers([header::CONTENT_TYPE, header::AUTHORIZATION]),
        );
    }
    app
}

/// Serves `config` on an already bound listener until the future is dropped.
pub async fn serve_on(listener: tokio::net::TcpListener, config: &ServiceConfig) -> anyhow::Result<()> {
    let orch = Arc::new(config.orchestrator()?);
    let app = router(AppState::new(orch, config), config.cors_origin.as_deref());
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app).await?;
    Ok(())
}

pub async fn serve(config: &ServiceConfig) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(&config.listen)
        .await
        .map_err(|e| anyhow::anyhow!("cannot bind {}: {e}", config.listen))?;
    serve_on(listener, config).await
}
