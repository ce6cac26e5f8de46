//! HTTP + WebSocket service over one store.
//!
//! Reads run on the request tasks and only see committed calls. Runs and
//! replays go to a single worker thread in arrival order; a request that
//! arrives while the worker is busy is queued and answered with a ticket.

use std::collections::BTreeMap;
use std::sync::{mpsc, Arc, Mutex};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{broadcast, oneshot};

use trk_core::compare::{align, compare_states, line_timeline, CompareError, SessionWindow};
use trk_core::guest::Datum;
use trk_core::host::{Host, HostConfig, InputQueue};
use trk_core::store::{BlobId, CallId, CodeVersionId, SessionId, StoreError, StoreHandle};

use crate::api::{aligned_json, call_json, parse_state, state_view};
use crate::request::{CommitFn, Outcome, ReplayRequest, RequestError, RunRequest};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    session: Option<SessionId>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> ApiError {
        ApiError { status, code, message: message.into(), session: None }
    }

    fn bad_request(message: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Io { .. } | StoreError::Corrupt { .. } | StoreError::VersionMismatch { .. } => {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
            }
            StoreError::MissingDirectory(_) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
            _ => ApiError::new(StatusCode::NOT_FOUND, "unknown_id", e.to_string()),
        }
    }
}

impl From<RequestError> for ApiError {
    fn from(e: RequestError) -> Self {
        let (status, code) = if e.is_internal() {
            (StatusCode::INTERNAL_SERVER_ERROR, "internal")
        } else if e.is_unknown_id() {
            (StatusCode::NOT_FOUND, "unknown_id")
        } else if e.session().is_some() {
            (StatusCode::UNPROCESSABLE_ENTITY, "run_failed")
        } else {
            (StatusCode::UNPROCESSABLE_ENTITY, "rejected")
        };
        ApiError { status, code, message: e.to_string(), session: e.session() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.code, "message": self.message, "session": self.session } });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Complete { session: SessionId, stats: trk_core::monitor::RecordStats, value: Option<Value> },
    Failed { code: &'static str, message: String, session: Option<SessionId> },
}

enum Work {
    Replay(ReplayRequest),
    Run(RunRequest),
}

struct Job {
    ticket: u64,
    work: Work,
    reply: Option<oneshot::Sender<Result<Outcome, ApiError>>>,
}

#[derive(Default)]
struct Book {
    next: u64,
    /// Jobs queued or running.
    active: usize,
    status: BTreeMap<u64, JobStatus>,
}

struct Inner {
    store: StoreHandle,
    events: broadcast::Sender<String>,
    book: Mutex<Book>,
    queue: Mutex<mpsc::Sender<Job>>,
    input: InputQueue,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// Starts the worker thread.
    pub fn new(store: StoreHandle) -> AppState {
        let (tx, rx) = mpsc::channel::<Job>();
        let (events, _) = broadcast::channel(4096);
        let state = AppState(Arc::new(Inner {
            store,
            events,
            book: Mutex::default(),
            queue: Mutex::new(tx),
            input: InputQueue::default(),
        }));
        let worker = state.clone();
        std::thread::Builder::new()
            .name("trk-replay".into())
            .spawn(move || {
                while let Ok(job) = rx.recv() {
                    worker.process(job);
                }
            })
            .expect("spawn worker");
        state
    }

    pub fn store(&self) -> &StoreHandle {
        &self.0.store
    }

    pub fn subscribe(&self) -> broadcast::Receiver<String> {
        self.0.events.subscribe()
    }

    fn announce(&self, msg: Value) {
        let _ = self.0.events.send(msg.to_string());
    }

    fn set_status(&self, ticket: u64, status: JobStatus) {
        self.announce(json!({ "type": "job", "ticket": ticket, "job": status }));
        self.0.book.lock().expect("book").status.insert(ticket, status);
    }

    fn process(&self, job: Job) {
        self.set_status(job.ticket, JobStatus::Running);
        let events = self.0.events.clone();
        let on_commit: CommitFn = Box::new(move |session, ordinal| {
            let _ = events.send(json!({ "type": "call", "session": session, "ordinal": ordinal }).to_string());
        });
        let store = &self.0.store;
        let result = match &job.work {
            Work::Replay(r) => {
                let host = Host::with_input(HostConfig { seed: r.seed.unwrap_or(0), script: None }, self.0.input.clone());
                r.execute(store, &host, Some(on_commit))
            }
            Work::Run(r) => r.execute(store, &Host::with_input(HostConfig::default(), self.0.input.clone()), Some(on_commit)),
        };
        let mut result = result.map_err(ApiError::from);
        if store.read().location().is_some() {
            if let Err(e) = store.read().persist(None) {
                result = Err(ApiError::from(e));
            }
        }
        let status = match &result {
            Ok(o) => JobStatus::Complete { session: o.session, stats: o.stats, value: o.value.clone() },
            Err(e) => JobStatus::Failed { code: e.code, message: e.message.clone(), session: e.session },
        };
        self.set_status(job.ticket, status);
        self.0.book.lock().expect("book").active -= 1;
        if let Some(reply) = job.reply {
            let _ = reply.send(result);
        }
    }

    /// Runs `work` now if the worker is idle, else queues it.
    async fn submit(&self, work: Work) -> ApiResult<Response> {
        let (ticket, busy) = {
            let mut book = self.0.book.lock().expect("book");
            let ticket = book.next;
            book.next += 1;
            let busy = book.active > 0;
            book.active += 1;
            book.status.insert(ticket, JobStatus::Queued);
            (ticket, busy)
        };
        let queue = self.0.queue.lock().expect("queue").clone();
        if busy {
            queue.send(Job { ticket, work, reply: None }).expect("worker alive");
            self.announce(json!({ "type": "job", "ticket": ticket, "job": JobStatus::Queued }));
            return Ok((StatusCode::ACCEPTED, Json(json!({ "ticket": ticket, "status": "queued" }))).into_response());
        }
        let (tx, rx) = oneshot::channel();
        queue.send(Job { ticket, work, reply: Some(tx) }).expect("worker alive");
        let outcome = rx.await.map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "worker stopped"))??;
        Ok(Json(json!({
            "ticket": ticket,
            "status": "complete",
            "session": outcome.session,
            "stats": outcome.stats,
            "value": outcome.value,
        }))
        .into_response())
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/sessions", get(sessions))
        .route("/api/sessions/{id}/calls", get(session_calls))
        .route("/api/calls/{id}/snapshots", get(call_snapshots))
        .route("/api/calls/{id}/lines/{line}", get(call_line))
        .route("/api/state/{state}", get(get_state))
        .route("/api/compare", get(compare))
        .route("/api/align", get(align_stream))
        .route("/api/code", get(code_versions))
        .route("/api/code/{id}", get(code_version))
        .route("/api/blobs/{id}", get(blob))
        .route("/api/replay", post(replay))
        .route("/api/run", post(run))
        .route("/api/jobs/{ticket}", get(job))
        .route("/api/input", post(input))
        .route("/api/ws", get(ws))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: AppState, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

fn id<T: std::str::FromStr<Err = String>>(text: &str) -> ApiResult<T> {
    text.parse().map_err(ApiError::bad_request)
}

async fn sessions(State(s): State<AppState>) -> ApiResult<Json<Value>> {
    let r = s.store().read();
    let rows: Vec<Value> = r
        .sessions()
        .iter()
        .map(|x| {
            let mut j = serde_json::to_value(x).expect("sessions serialize");
            j["calls"] = json!(r.session_calls(x.id).len());
            j
        })
        .collect();
    Ok(Json(Value::Array(rows)))
}

async fn session_calls(State(s): State<AppState>, Path(sid): Path<String>) -> ApiResult<Json<Value>> {
    let sid: SessionId = id(&sid)?;
    let r = s.store().read();
    r.session(sid)?;
    let rows = r.session_calls(sid).iter().map(|c| call_json(&r, c.id)).collect::<Result<Vec<_>, _>>()?;
    Ok(Json(Value::Array(rows)))
}

async fn call_snapshots(State(s): State<AppState>, Path(cid): Path<String>) -> ApiResult<Json<Value>> {
    let cid: CallId = id(&cid)?;
    let r = s.store().read();
    let c = r.call(cid)?;
    let rows: Vec<Value> = r
        .call_snapshots(cid)
        .iter()
        .map(|p| json!({ "id": p.id, "ordinal": p.ordinal, "line": p.line + 1 - c.def_line, "file_line": p.line }))
        .collect();
    Ok(Json(Value::Array(rows)))
}

async fn call_line(State(s): State<AppState>, Path((cid, line)): Path<(String, u32)>) -> ApiResult<Json<Value>> {
    let cid: CallId = id(&cid)?;
    let r = s.store().read();
    let visits = line_timeline(&r, cid, line)?;
    let rows: Vec<Value> = visits
        .iter()
        .map(|(p, vars)| json!({ "snapshot": p, "variables": trk_core::compare::datum_map_json(vars) }))
        .collect();
    Ok(Json(Value::Array(rows)))
}

async fn get_state(State(s): State<AppState>, Path(text): Path<String>) -> ApiResult<Json<Value>> {
    let st = parse_state(&text).map_err(ApiError::bad_request)?;
    let r = s.store().read();
    Ok(Json(serde_json::to_value(state_view(&r, st)?).expect("views serialize")))
}

#[derive(Deserialize)]
struct CompareQuery {
    a: String,
    b: String,
}

async fn compare(State(s): State<AppState>, Query(q): Query<CompareQuery>) -> ApiResult<Json<Value>> {
    let (a, b) = (parse_state(&q.a).map_err(ApiError::bad_request)?, parse_state(&q.b).map_err(ApiError::bad_request)?);
    let r = s.store().read();
    match compare_states(&r, a, b) {
        Ok(d) => Ok(Json(d.to_json())),
        Err(CompareError::Store(e)) => Err(e.into()),
        Err(e @ CompareError::GranularityMismatch) => Err(ApiError::bad_request(e.to_string())),
    }
}

#[derive(Deserialize)]
struct AlignQuery {
    a: String,
    b: String,
    #[serde(default)]
    a_start: u64,
    #[serde(default)]
    b_start: u64,
}

/// One aligned pair per line (NDJSON).
async fn align_stream(State(s): State<AppState>, Query(q): Query<AlignQuery>) -> ApiResult<Response> {
    let (a, b): (SessionId, SessionId) = (id(&q.a)?, id(&q.b)?);
    let r = s.store().read();
    let wa = SessionWindow { session: a, start: q.a_start, end: None };
    let wb = SessionWindow { session: b, start: q.b_start, end: None };
    let mut body = String::new();
    for pair in align(&r, &wa, &wb)? {
        body.push_str(&aligned_json(&r, &pair).to_string());
        body.push('\n');
    }
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

#[derive(Deserialize)]
struct CodeQuery {
    function: Option<String>,
}

async fn code_versions(State(s): State<AppState>, Query(q): Query<CodeQuery>) -> ApiResult<Json<Value>> {
    let r = s.store().read();
    let rows: Vec<Value> = r
        .code_versions()
        .iter()
        .filter(|k| q.function.as_ref().is_none_or(|f| &k.function_name == f))
        .map(|k| serde_json::to_value(k).expect("code serializes"))
        .collect();
    Ok(Json(Value::Array(rows)))
}

async fn code_version(State(s): State<AppState>, Path(kid): Path<String>) -> ApiResult<Json<Value>> {
    let kid: CodeVersionId = id(&kid)?;
    let r = s.store().read();
    Ok(Json(serde_json::to_value(r.code_version(kid)?).expect("code serializes")))
}

async fn blob(State(s): State<AppState>, Path(bid): Path<String>) -> ApiResult<Response> {
    let bid: BlobId = id(&bid)?;
    let r = s.store().read();
    let b = r.hook_blob(bid)?;
    let mime = if b.kind.ends_with("/json") { "application/json" } else { "application/octet-stream" };
    Ok(([(header::CONTENT_TYPE, mime.to_string()), (header::HeaderName::from_static("x-blob-kind"), b.kind.clone())], b.bytes.clone())
        .into_response())
}

async fn replay(State(s): State<AppState>, body: axum::body::Bytes) -> ApiResult<Response> {
    let req: ReplayRequest = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    req.validate().map_err(ApiError::bad_request)?;
    s.submit(Work::Replay(req)).await
}

async fn run(State(s): State<AppState>, body: axum::body::Bytes) -> ApiResult<Response> {
    let req: RunRequest = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    req.program().map_err(ApiError::from)?;
    s.submit(Work::Run(req)).await
}

async fn job(State(s): State<AppState>, Path(ticket): Path<u64>) -> ApiResult<Json<Value>> {
    let book = s.0.book.lock().expect("book");
    let status = book
        .status
        .get(&ticket)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_id", format!("unknown ticket {ticket}")))?;
    Ok(Json(json!({ "ticket": ticket, "job": status })))
}

/// Queues one input event for the next `get_events` of a live run.
async fn input(State(s): State<AppState>, Json(event): Json<Value>) -> ApiResult<StatusCode> {
    let d = Datum::from_json(&event).map_err(ApiError::bad_request)?;
    s.0.input.lock().expect("input queue").push_back(d);
    Ok(StatusCode::NO_CONTENT)
}

async fn ws(State(s): State<AppState>, upgrade: WebSocketUpgrade) -> Response {
    upgrade.on_upgrade(move |socket| ws_session(s, socket))
}

/// Pushes every announcement to the client. Inbound frames are ignored;
/// input goes through `POST /api/input`.
async fn ws_session(s: AppState, socket: WebSocket) {
    let mut rx = s.subscribe();
    let (mut sink, mut stream) = socket.split();
    if sink.send(Message::Text(json!({ "type": "hello" }).to_string().into())).await.is_err() {
        return;
    }
    loop {
        tokio::select! {
            msg = rx.recv() => {
                let text = match msg {
                    Ok(text) => text,
                    Err(broadcast::error::RecvError::Lagged(n)) => json!({ "type": "lagged", "missed": n }).to_string(),
                    Err(broadcast::error::RecvError::Closed) => break,
                };
                if sink.send(Message::Text(text.into())).await.is_err() {
                    break;
                }
            }
            incoming = stream.next() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
        }
    }
}
