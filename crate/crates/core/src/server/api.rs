//! HTTP API for third-party applications. Routes and JSON shapes are
//! documented in `docs/api.md`.

use std::collections::HashMap;
use std::convert::Infallible;
use std::net::SocketAddr;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use super::{DeviceError, RolloutError, RolloutRequest, Server};
use crate::lwm2m::{parse_path, Path, ResourceValue, ValueKind};
use crate::objects;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    coap_code: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> ApiError {
        ApiError {
            status,
            message: message.into(),
            coap_code: None,
        }
    }

    fn not_found(what: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::NOT_FOUND, what)
    }

    fn bad_request(what: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::BAD_REQUEST, what)
    }
}

impl From<DeviceError> for ApiError {
    fn from(e: DeviceError) -> ApiError {
        let status = StatusCode::from_u16(e.http_status()).unwrap_or(StatusCode::BAD_GATEWAY);
        let coap_code = match &e {
            DeviceError::Device(c) => Some(c.to_string()),
            _ => None,
        };
        ApiError {
            status,
            message: e.to_string(),
            coap_code,
        }
    }
}

impl From<RolloutError> for ApiError {
    fn from(e: RolloutError) -> ApiError {
        let status = match e {
            RolloutError::UnknownImage(_) | RolloutError::UnknownEndpoint(_) => StatusCode::NOT_FOUND,
            RolloutError::Conflict(_) => StatusCode::CONFLICT,
            RolloutError::NoTargets => StatusCode::BAD_REQUEST,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(c) = self.coap_code {
            body["coap_code"] = json!(c);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(server: Server) -> Router {
    let api = Router::new()
        .route("/api/devices", get(list_devices))
        .route("/api/devices/{ep}", get(get_device))
        .route("/api/devices/{ep}/resources/{*path}", get(read_resource).put(write_resource))
        .route("/api/devices/{ep}/execute/{*path}", post(execute_resource))
        .route("/api/devices/{ep}/history/{*path}", get(history))
        .route("/api/devices/{ep}/anomaly-captures", get(anomaly_captures))
        .route("/api/images", get(list_images).post(upload_image))
        .route("/api/rollouts", get(list_rollouts).post(create_rollout))
        .route("/api/rollouts/{id}", get(get_rollout))
        .route("/api/objects", get(object_defs))
        .route("/api/events", get(events));
    api.layer(middleware::from_fn_with_state(server.clone(), auth))
        .layer(middleware::from_fn(cors))
        .with_state(server)
}

/// Serve the API on `addr` until the task is dropped.
pub async fn serve(server: Server, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "HTTP API listening");
    axum::serve(listener, router(server)).await
}

async fn auth(State(server): State<Server>, req: Request, next: Next) -> Response {
    let Some(token) = server.config().api_token.as_deref() else {
        return next.run(req).await;
    };
    let bearer = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    let query = req.uri().query().unwrap_or("").split('&').find_map(|kv| kv.strip_prefix("token="));
    if bearer == Some(token) || query == Some(token) || req.method() == axum::http::Method::OPTIONS {
        next.run(req).await
    } else {
        ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong token").into_response()
    }
}

async fn cors(req: Request, next: Next) -> Response {
    if req.method() == axum::http::Method::OPTIONS {
        let mut resp = StatusCode::NO_CONTENT.into_response();
        allow_origin(resp.headers_mut());
        return resp;
    }
    let mut resp = next.run(req).await;
    allow_origin(resp.headers_mut());
    resp
}

fn allow_origin(h: &mut HeaderMap) {
    h.insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, "*".parse().unwrap());
    h.insert(
        header::ACCESS_CONTROL_ALLOW_HEADERS,
        "authorization, content-type".parse().unwrap(),
    );
    h.insert(
        header::ACCESS_CONTROL_ALLOW_METHODS,
        "GET, PUT, POST, OPTIONS".parse().unwrap(),
    );
}

fn device_json(server: &Server, ep: &str) -> Option<Value> {
    let now = server.now();
    match server.device(ep) {
        Some(r) => Some(json!({
            "endpoint": r.endpoint,
            "status": if r.is_stale(now) { "stale" } else { "online" },
            "location": r.location,
            "lifetime": r.lifetime,
            "binding": r.binding,
            "queue_mode": r.queue_mode,
            "registered_at": r.registered_at,
            "last_update": r.last_update,
            "expires_at": r.expires_at(),
            "objects": r.objects,
        })),
        None if server.knows(ep) => Some(json!({ "endpoint": ep, "status": "offline" })),
        None => None,
    }
}

async fn list_devices(State(server): State<Server>) -> Json<Value> {
    let list: Vec<Value> = server
        .devices()
        .iter()
        .filter_map(|r| device_json(&server, &r.endpoint))
        .collect();
    Json(Value::Array(list))
}

async fn get_device(State(server): State<Server>, UrlPath(ep): UrlPath<String>) -> ApiResult<Json<Value>> {
    let mut v = device_json(&server, &ep).ok_or_else(|| ApiError::not_found(format!("unknown endpoint {ep}")))?;
    let mut latest = serde_json::Map::new();
    for p in server.series_paths(&ep) {
        if let Some(s) = server.latest(&ep, &p) {
            latest.insert(p, json!(s));
        }
    }
    v["latest"] = Value::Object(latest);
    Ok(Json(v))
}

fn resource_path(raw: &str) -> ApiResult<Path> {
    parse_path(&format!("/{}", raw.trim_start_matches('/'))).map_err(|_| ApiError::not_found(format!("bad path {raw}")))
}

fn known_endpoint(server: &Server, ep: &str) -> ApiResult<()> {
    if server.device(ep).is_some() {
        Ok(())
    } else {
        Err(ApiError::not_found(format!("unknown endpoint {ep}")))
    }
}

async fn read_resource(
    State(server): State<Server>,
    UrlPath((ep, raw)): UrlPath<(String, String)>,
) -> ApiResult<Json<Value>> {
    let path = resource_path(&raw)?;
    known_endpoint(&server, &ep)?;
    let records = server.read(&ep, &path).await?;
    let mut body = json!({
        "endpoint": ep,
        "path": path.to_string(),
        "records": records.iter().map(|r| json!({ "path": r.path.to_string(), "value": r.value })).collect::<Vec<_>>(),
    });
    if let [only] = records.as_slice() {
        if only.path == path {
            body["value"] = json!(only.value);
        }
    }
    Ok(Json(body))
}

fn resource_kind(path: &Path) -> Option<ValueKind> {
    objects::all_definitions()
        .into_iter()
        .find(|d| d.id == path.object)?
        .resource(path.resource?)?
        .kind
}

/// `{"type": "float", "value": 0.5}` or just `{"value": 0.5}`, the kind
/// then coming from the object definition.
fn parse_value(path: &Path, body: &[u8]) -> ApiResult<ResourceValue> {
    let v: Value = serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON: {e}")))?;
    if v.get("type").is_some() {
        return serde_json::from_value(v).map_err(|e| ApiError::bad_request(format!("invalid value: {e}")));
    }
    let raw = v.get("value").ok_or_else(|| ApiError::bad_request("missing \"value\""))?;
    let kind = resource_kind(path).ok_or_else(|| ApiError::not_found(format!("unknown resource {path}")))?;
    let value = match (kind, raw) {
        (ValueKind::Float, Value::Number(n)) => n.as_f64().map(ResourceValue::Float),
        (ValueKind::Integer, Value::Number(n)) => n.as_i64().map(ResourceValue::Integer),
        (ValueKind::Time, Value::Number(n)) => n.as_i64().map(ResourceValue::Time),
        (ValueKind::String, Value::String(s)) => Some(ResourceValue::String(s.clone())),
        (ValueKind::Boolean, Value::Bool(b)) => Some(ResourceValue::Boolean(*b)),
        _ => None,
    };
    value.ok_or_else(|| ApiError::bad_request(format!("value does not fit {kind:?}")))
}

async fn write_resource(
    State(server): State<Server>,
    UrlPath((ep, raw)): UrlPath<(String, String)>,
    body: Bytes,
) -> ApiResult<StatusCode> {
    let path = resource_path(&raw)?;
    known_endpoint(&server, &ep)?;
    if path.resource.is_none() {
        return Err(ApiError::bad_request("writes address a single resource"));
    }
    let value = parse_value(&path, &body)?;
    server.write_value(&ep, &path, value).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn execute_resource(
    State(server): State<Server>,
    UrlPath((ep, raw)): UrlPath<(String, String)>,
    body: Bytes,
) -> ApiResult<StatusCode> {
    let path = resource_path(&raw)?;
    known_endpoint(&server, &ep)?;
    let args = String::from_utf8_lossy(&body).to_string();
    server.execute(&ep, &path, &args).await?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Deserialize)]
struct Range {
    from: Option<f64>,
    to: Option<f64>,
}

async fn history(
    State(server): State<Server>,
    UrlPath((ep, raw)): UrlPath<(String, String)>,
    Query(range): Query<Range>,
) -> ApiResult<Json<Value>> {
    let path = resource_path(&raw)?;
    if !server.knows(&ep) {
        return Err(ApiError::not_found(format!("unknown endpoint {ep}")));
    }
    let samples = server.history(&ep, &path.to_string(), range.from, range.to);
    Ok(Json(json!({ "endpoint": ep, "path": path.to_string(), "samples": samples })))
}

fn capture_json(t: f64, bytes: &[u8], max_score: Option<f64>) -> Option<Value> {
    let w = objects::decode_capture(bytes).ok()?;
    Some(json!({
        "t": t,
        "max_score": max_score,
        "rate_hz": w.rate_hz,
        "samples": w.samples,
    }))
}

async fn anomaly_captures(
    State(server): State<Server>,
    UrlPath(ep): UrlPath<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<Value>> {
    if !server.knows(&ep) {
        return Err(ApiError::not_found(format!("unknown endpoint {ep}")));
    }
    let scores = server.history(&ep, &objects::MAX_ANOMALY_SCORE.to_string(), None, None);
    let score_at = |t: f64| {
        scores
            .iter()
            .rev()
            .find(|s| s.t <= t)
            .and_then(|s| s.value.as_f64())
    };
    let mut captures: Vec<Value> = server
        .history(&ep, &objects::CAPTURED_WINDOW.to_string(), None, None)
        .iter()
        .filter_map(|s| capture_json(s.t, s.value.as_bytes()?, score_at(s.t)))
        .collect();
    if q.get("live").is_some_and(|v| v == "true" || v == "1") {
        known_endpoint(&server, &ep)?;
        let records = server.read(&ep, &Path::instance(objects::ANOMALY_ANALYZER, 0)).await?;
        let score = records
            .iter()
            .find(|r| r.path == objects::MAX_ANOMALY_SCORE)
            .and_then(|r| r.value.as_f64());
        if let Some(bytes) = records
            .iter()
            .find(|r| r.path == objects::CAPTURED_WINDOW)
            .and_then(|r| r.value.as_bytes())
        {
            if let Some(mut c) = capture_json(server.now(), bytes, score) {
                c["live"] = json!(true);
                captures.push(c);
            }
        }
    }
    Ok(Json(json!({ "endpoint": ep, "captures": captures })))
}

async fn list_images(State(server): State<Server>) -> Json<Value> {
    Json(json!(server.images()))
}

async fn upload_image(
    State(server): State<Server>,
    Query(q): Query<HashMap<String, String>>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let name = q.get("name").filter(|n| !n.is_empty()).ok_or_else(|| ApiError::bad_request("missing name"))?;
    let version = q.get("version").cloned().unwrap_or_default();
    if body.is_empty() {
        return Err(ApiError::bad_request("empty image"));
    }
    let info = server
        .add_image(name, &version, body.to_vec())
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok((StatusCode::CREATED, Json(json!(info))))
}

async fn list_rollouts(State(server): State<Server>) -> Json<Value> {
    Json(json!(server.rollouts()))
}

async fn create_rollout(State(server): State<Server>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let req: RolloutRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid rollout request: {e}")))?;
    let job = server.start_rollout(req)?;
    Ok((StatusCode::CREATED, Json(json!(job))))
}

async fn get_rollout(State(server): State<Server>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let job = id
        .parse()
        .ok()
        .and_then(|id| server.rollout(id))
        .ok_or_else(|| ApiError::not_found(format!("unknown rollout {id}")))?;
    Ok(Json(json!(job)))
}

async fn object_defs() -> impl IntoResponse {
    ([(header::CONTENT_TYPE, "application/json")], objects::OBJECTS_JSON)
}

async fn events(State(server): State<Server>) -> Sse<impl futures::Stream<Item = Result<Event, Infallible>>> {
    let rx = server.subscribe();
    let stream = futures::stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(ev) => {
                    let data = serde_json::to_string(&ev).unwrap_or_default();
                    return Some((Ok(Event::default().data(data)), rx));
                }
                Err(tokio::sync::broadcast::error::RecvError::Lagged(_)) => continue,
                Err(tokio::sync::broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}
