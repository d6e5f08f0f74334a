use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock as StdRwLock};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::{broadcast, mpsc, RwLock};

use tfseg::isoray::{Camera, RenderError};
use tfseg::simquery::{ClassDef, QueryError};
use tfseg::volgrid::GridError;
use tfseg::Axis;

use crate::registry::Registry;
use crate::session::{check_version, Event, EventKind, RefineInput, Session, SessionError, API_VERSION};

/// Live session plus its event channel and refine queue.
pub struct SessionHandle {
    pub session: Arc<RwLock<Session>>,
    events: broadcast::Sender<Event>,
    jobs: mpsc::UnboundedSender<(u64, u32)>,
    next_job: AtomicU64,
}

impl SessionHandle {
    fn spawn(session: Session) -> Arc<Self> {
        let session = Arc::new(RwLock::new(session));
        let (events, _) = broadcast::channel(256);
        let (jobs, rx) = mpsc::unbounded_channel();
        tokio::spawn(refine_worker(session.clone(), events.clone(), rx));
        Arc::new(SessionHandle {
            session,
            events,
            jobs,
            next_job: AtomicU64::new(1),
        })
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Event> {
        self.events.subscribe()
    }

    fn publish(&self, events: Vec<Event>) {
        for e in events {
            // No subscribers is fine.
            let _ = self.events.send(e);
        }
    }
}

/// Runs one refine at a time; the session lock is held only to capture
/// inputs and to install the result.
async fn refine_worker(
    session: Arc<RwLock<Session>>,
    events: broadcast::Sender<Event>,
    mut rx: mpsc::UnboundedReceiver<(u64, u32)>,
) {
    while let Some((job_id, class_id)) = rx.recv().await {
        let input = session.read().await.refine_input(class_id);
        let result = match input {
            Ok(input) => tokio::task::spawn_blocking(move || {
                let out = input.run();
                (input, out)
            })
            .await
            .map_err(|e| SessionError::BadRequest(format!("refine task failed: {e}")))
            .and_then(|(input, out)| out.map(|s| (input, s))),
            Err(e) => Err(e),
        };
        let event = match result {
            Ok((input, refined)) => install(&session, &input, refined).await,
            Err(e) => {
                let mut ev = Event::new(EventKind::RefineFailed, class_id, None);
                ev.message = Some(e.to_string());
                Some(ev)
            }
        };
        if let Some(mut ev) = event {
            ev.job_id = Some(job_id);
            let _ = events.send(ev);
        }
    }
}

async fn install(session: &RwLock<Session>, input: &RefineInput, refined: tfseg::SimilarityVolume) -> Option<Event> {
    let mut s = session.write().await;
    match s.install_refined(input, refined) {
        Some(ev) => Some(ev),
        None => {
            let mut ev = Event::new(EventKind::RefineFailed, input.class_id, None);
            ev.message = Some("inputs changed while refining; result discarded".into());
            Some(ev)
        }
    }
}

/// Shared server state: the read-only volume registry and live sessions.
pub struct AppState {
    pub registry: Arc<Registry>,
    sessions: StdRwLock<HashMap<String, Arc<SessionHandle>>>,
    data_dir: PathBuf,
}

impl AppState {
    pub fn new(registry: Registry, data_dir: impl Into<PathBuf>) -> Arc<Self> {
        Arc::new(AppState {
            registry: Arc::new(registry),
            sessions: StdRwLock::new(HashMap::new()),
            data_dir: data_dir.into(),
        })
    }

    pub fn session(&self, id: &str) -> Result<Arc<SessionHandle>, SessionError> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::SessionNotFound(id.to_string()))
    }

    fn register(&self, session: Session) -> Arc<SessionHandle> {
        let id = session.id().to_string();
        let h = SessionHandle::spawn(session);
        self.sessions.write().unwrap().insert(id, h.clone());
        h
    }
}

/// Error response `{"v":1,"error":...}` with a status matching the failure.
pub struct ApiError(pub SessionError);

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        ApiError(e)
    }
}

impl From<serde_json::Error> for ApiError {
    fn from(e: serde_json::Error) -> Self {
        ApiError(e.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        use SessionError::*;
        let status = match &self.0 {
            VolumeNotFound(_) | SessionNotFound(_) | UnknownClass(_) => StatusCode::NOT_FOUND,
            Version(_) | BadRequest(_) | Json(_) => StatusCode::BAD_REQUEST,
            Query(QueryError::Grid(_)) => StatusCode::INTERNAL_SERVER_ERROR,
            Query(_) => StatusCode::BAD_REQUEST,
            Render(RenderError::Png(_)) => StatusCode::INTERNAL_SERVER_ERROR,
            Render(_) => StatusCode::BAD_REQUEST,
            Solver(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Grid(GridError::IoFailure { .. }) | Io { .. } => StatusCode::NOT_FOUND,
            Grid(_) => StatusCode::BAD_REQUEST,
        };
        (status, axum::Json(json!({"v": API_VERSION, "error": self.0.to_string()}))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Checks `"v"` and decodes the rest of the body.
fn versioned<T: DeserializeOwned>(mut body: Value) -> Result<T, SessionError> {
    check_version(&body)?;
    if let Some(m) = body.as_object_mut() {
        m.remove("v");
    }
    Ok(serde_json::from_value(body)?)
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/volumes", get(list_volumes))
        .route("/sessions", post(create_session))
        .route("/sessions/load", post(load_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/classes", post(add_class))
        .route("/sessions/{id}/classes/{cid}", patch(patch_class).delete(delete_class))
        .route("/sessions/{id}/classes/{cid}/annotations", post(annotate))
        .route("/sessions/{id}/classes/{cid}/erase", post(erase))
        .route("/sessions/{id}/classes/{cid}/refine", post(refine))
        .route("/sessions/{id}/slice/{axis}/{index}", get(slice))
        .route("/sessions/{id}/render", get(render_frame))
        .route("/sessions/{id}/save", post(save))
        .route("/sessions/{id}/events", get(events))
        .with_state(state)
}

/// Serves the API until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

async fn list_volumes(State(st): State<Arc<AppState>>) -> Json<Value> {
    let vols: Vec<Value> = st
        .registry
        .entries()
        .map(|e| {
            json!({
                "id": e.id,
                "dims": e.volume.dims,
                "feature_dims": e.features.dims,
                "feature_dim": e.features.feature_dim,
            })
        })
        .collect();
    Json(json!({"v": API_VERSION, "volumes": vols}))
}

#[derive(Deserialize)]
struct CreateBody {
    volume_id: String,
}

async fn create_session(State(st): State<Arc<AppState>>, Json(body): Json<Value>) -> ApiResult<Response> {
    let body: CreateBody = versioned(body)?;
    let entry = st.registry.get(&body.volume_id)?;
    let session = Session::new(uuid::Uuid::new_v4().simple().to_string(), &entry);
    let snap = session.snapshot();
    st.register(session);
    Ok((StatusCode::CREATED, Json(snap)).into_response())
}

#[derive(Deserialize)]
struct LoadBody {
    path: PathBuf,
}

async fn load_session(State(st): State<Arc<AppState>>, Json(body): Json<Value>) -> ApiResult<Response> {
    let body: LoadBody = versioned(body)?;
    let registry = st.registry.clone();
    let session = tokio::task::spawn_blocking(move || {
        Session::load(&body.path, uuid::Uuid::new_v4().simple().to_string(), &registry)
    })
    .await
    .map_err(|e| SessionError::BadRequest(e.to_string()))??;
    let snap = session.snapshot();
    st.register(session);
    Ok((StatusCode::CREATED, Json(snap)).into_response())
}

async fn get_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let h = st.session(&id)?;
    let snap = h.session.read().await.snapshot();
    Ok(Json(snap).into_response())
}

/// Merges a partial class body over `base`. Solver settings are accepted
/// only with `"advanced": true`.
fn merge_class(base: Value, mut body: Value) -> Result<ClassDef, SessionError> {
    let obj = body
        .as_object_mut()
        .ok_or_else(|| SessionError::BadRequest("class body must be an object".into()))?;
    let advanced = obj.remove("advanced").and_then(|v| v.as_bool()).unwrap_or(false);
    if obj.contains_key("solver_cfg") && !advanced {
        return Err(SessionError::BadRequest(
            "solver settings require \"advanced\": true".into(),
        ));
    }
    let mut merged = base;
    let target = merged.as_object_mut().expect("class serializes to an object");
    for (k, v) in obj.iter() {
        if k == "solver_cfg" {
            let cfg = target.entry("solver_cfg").or_insert(json!({}));
            if let (Some(c), Some(v)) = (cfg.as_object_mut(), v.as_object()) {
                c.extend(v.clone());
                continue;
            }
        }
        target.insert(k.clone(), v.clone());
    }
    Ok(serde_json::from_value(merged)?)
}

async fn add_class(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<Value>,
) -> ApiResult<Response> {
    check_version(&body)?;
    let mut body = body;
    body.as_object_mut().map(|m| m.remove("v"));
    let h = st.session(&id)?;
    let mut s = h.session.write().await;
    let cid = match body.get("id") {
        Some(v) => v
            .as_u64()
            .filter(|&v| v > 0 && v <= u32::MAX as u64)
            .ok_or_else(|| SessionError::BadRequest("class id must be a positive integer".into()))? as u32,
        None => s.next_class_id(),
    };
    let name = body
        .get("name")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .unwrap_or_else(|| format!("class_{cid}"));
    let base = match s.class(cid) {
        Ok(c) => c.clone(),
        Err(_) => ClassDef::new(cid, name),
    };
    let def = merge_class(serde_json::to_value(base)?, body)?;
    if def.id != cid {
        return Err(SessionError::BadRequest("class id mismatch".into()).into());
    }
    let events = s.upsert_class(def.clone())?;
    drop(s);
    h.publish(events);
    Ok((StatusCode::CREATED, Json(json!({"v": API_VERSION, "class": def}))).into_response())
}

async fn patch_class(
    State(st): State<Arc<AppState>>,
    Path((id, cid)): Path<(String, u32)>,
    Json(body): Json<Value>,
) -> ApiResult<Response> {
    check_version(&body)?;
    let mut body = body;
    body.as_object_mut().map(|m| m.remove("v"));
    if body.get("id").is_some_and(|v| v.as_u64() != Some(cid as u64)) {
        return Err(SessionError::BadRequest("class id cannot change".into()).into());
    }
    let h = st.session(&id)?;
    let mut s = h.session.clone().write_owned().await;
    let base = serde_json::to_value(s.class(cid)?.clone())?;
    let def = merge_class(base, body)?;
    // A proximity change recomputes the similarity map.
    let (def, events) = tokio::task::spawn_blocking(move || s.upsert_class(def.clone()).map(|ev| (def, ev)))
        .await
        .map_err(|e| SessionError::BadRequest(e.to_string()))??;
    h.publish(events);
    Ok(Json(json!({"v": API_VERSION, "class": def})).into_response())
}

async fn delete_class(State(st): State<Arc<AppState>>, Path((id, cid)): Path<(String, u32)>) -> ApiResult<Response> {
    let h = st.session(&id)?;
    let events = h.session.write().await.delete_class(cid)?;
    h.publish(events);
    Ok(Json(json!({"v": API_VERSION, "deleted": cid})).into_response())
}

#[derive(Deserialize)]
struct AnnotateBody {
    points: Vec<[i64; 3]>,
}

async fn annotate(
    State(st): State<Arc<AppState>>,
    Path((id, cid)): Path<(String, u32)>,
    Json(body): Json<Value>,
) -> ApiResult<Response> {
    let body: AnnotateBody = versioned(body)?;
    let h = st.session(&id)?;
    let mut s = h.session.clone().write_owned().await;
    let (out, events) = tokio::task::spawn_blocking(move || s.annotate(cid, &body.points))
        .await
        .map_err(|e| SessionError::BadRequest(e.to_string()))??;
    h.publish(events);
    Ok(Json(out).into_response())
}

#[derive(Deserialize)]
struct EraseBody {
    point: [f32; 3],
    radius: f32,
}

async fn erase(
    State(st): State<Arc<AppState>>,
    Path((id, cid)): Path<(String, u32)>,
    Json(body): Json<Value>,
) -> ApiResult<Response> {
    let body: EraseBody = versioned(body)?;
    let h = st.session(&id)?;
    let mut s = h.session.clone().write_owned().await;
    let (out, events) = tokio::task::spawn_blocking(move || s.erase(cid, body.point, body.radius))
        .await
        .map_err(|e| SessionError::BadRequest(e.to_string()))??;
    h.publish(events);
    Ok(Json(out).into_response())
}

async fn refine(State(st): State<Arc<AppState>>, Path((id, cid)): Path<(String, u32)>) -> ApiResult<Response> {
    let h = st.session(&id)?;
    h.session.read().await.class(cid)?;
    let job = h.next_job.fetch_add(1, Ordering::Relaxed);
    h.jobs
        .send((job, cid))
        .map_err(|_| SessionError::BadRequest("refine worker stopped".into()))?;
    Ok((StatusCode::ACCEPTED, Json(json!({"v": API_VERSION, "job_id": job}))).into_response())
}

fn parse_axis(s: &str) -> Result<Axis, SessionError> {
    match s {
        "x" | "X" | "0" => Ok(Axis::X),
        "y" | "Y" | "1" => Ok(Axis::Y),
        "z" | "Z" | "2" => Ok(Axis::Z),
        _ => Err(SessionError::BadRequest(format!("axis `{s}`: expected x, y or z"))),
    }
}

async fn slice(
    State(st): State<Arc<AppState>>,
    Path((id, axis, index)): Path<(String, String, usize)>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let axis = parse_axis(&axis)?;
    let overlay = q.get("overlay").is_some_and(|v| v != "0" && v != "false");
    let h = st.session(&id)?;
    let s = h.session.clone().read_owned().await;
    let bytes = tokio::task::spawn_blocking(move || s.slice_png(axis, index, overlay))
        .await
        .map_err(|e| SessionError::BadRequest(e.to_string()))??;
    Ok(png(bytes))
}

async fn render_frame(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let h = st.session(&id)?;
    let cam: Option<Camera> = match q.get("cam") {
        Some(text) => Some(
            serde_json::from_str(text).map_err(|e| SessionError::BadRequest(format!("cam: {e}")))?,
        ),
        None => None,
    };
    let s = h.session.clone().read_owned().await;
    let bytes = tokio::task::spawn_blocking(move || {
        let cam = cam.unwrap_or_else(|| s.camera.clone());
        s.render_png(&cam)
    })
    .await
    .map_err(|e| SessionError::BadRequest(e.to_string()))??;
    Ok(png(bytes))
}

async fn save(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Option<Json<Value>>) -> ApiResult<Response> {
    if let Some(Json(b)) = &body {
        check_version(b)?;
    }
    let h = st.session(&id)?;
    let dir = st.data_dir.join("sessions").join(&id);
    let s = h.session.clone().read_owned().await;
    let path = tokio::task::spawn_blocking(move || s.save(&dir))
        .await
        .map_err(|e| SessionError::BadRequest(e.to_string()))??;
    Ok(Json(json!({"v": API_VERSION, "path": path})).into_response())
}

async fn events(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    ws: WebSocketUpgrade,
) -> ApiResult<Response> {
    let h = st.session(&id)?;
    let rx = h.subscribe();
    Ok(ws.on_upgrade(move |socket| pump(socket, rx)))
}

async fn pump(mut socket: WebSocket, mut rx: broadcast::Receiver<Event>) {
    loop {
        tokio::select! {
            ev = rx.recv() => match ev {
                Ok(ev) => {
                    let text = serde_json::to_string(&ev).expect("event serializes");
                    if socket.send(Message::Text(text.into())).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => log::warn!("event stream lagged by {n}"),
                Err(broadcast::error::RecvError::Closed) => break,
            },
            msg = socket.recv() => match msg {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                _ => {}
            },
        }
    }
}
