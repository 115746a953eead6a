//! HTTP API for interactive sessions over a trained pipeline.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dhs_convqa::corpus::{Conversation, DialogFeature, Passage, Turn};
use dhs_convqa::entities::augment_conversation;
use dhs_convqa::harness::{run_turn, Models, PipelineConfig, RunOptions};
use dhs_convqa::metrics::tag_features;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use tokio::sync::Mutex;

struct Session {
    conv: Conversation,
    /// Serialized trace of each answered turn, kept as sent.
    traces: Vec<Box<RawValue>>,
}

pub struct AppState {
    models: Models,
    cfg: PipelineConfig,
    passages: BTreeMap<String, Passage>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

impl AppState {
    /// Passages are taken from `corpus`, first occurrence of each id.
    pub fn new(models: Models, cfg: PipelineConfig, corpus: &[Conversation]) -> Self {
        let mut passages = BTreeMap::new();
        for c in corpus {
            passages.entry(c.passage.id.clone()).or_insert_with(|| c.passage.clone());
        }
        AppState { models, cfg, passages, sessions: RwLock::new(HashMap::new()), next_id: AtomicU64::new(1) }
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions.read().expect("session map").get(id).cloned().ok_or_else(|| ApiError::not_found(format!("unknown session {id}")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn not_found(message: String) -> Self {
        ApiError { status: StatusCode::NOT_FOUND, message }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError { status: StatusCode::BAD_REQUEST, message: message.into() }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, message: e.to_string() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

fn json_bytes(body: String) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], body).into_response()
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub passage_id: Option<String>,
    pub passage_text: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
}

#[derive(Debug, Deserialize)]
pub struct Ask {
    pub text: String,
}

#[derive(Serialize)]
struct AskResponse<'a> {
    answer: &'a RawValue,
    trace: &'a RawValue,
    token_labels: &'a RawValue,
}

#[derive(Serialize)]
struct TraceResponse<'a> {
    session_id: &'a str,
    passage_id: &'a str,
    turns: &'a [Box<RawValue>],
}

#[derive(Serialize)]
struct PassageInfo<'a> {
    id: &'a str,
    title: &'a str,
    text: &'a str,
}

async fn list_passages(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let list: Vec<PassageInfo> = st.passages.values().map(|p| PassageInfo { id: &p.id, title: &p.title, text: &p.text }).collect();
    Json(serde_json::json!({ "passages": list }))
}

async fn create_session(State(st): State<Arc<AppState>>, Json(req): Json<CreateSession>) -> Result<Response, ApiError> {
    let n = st.next_id.fetch_add(1, Ordering::Relaxed);
    let session_id = format!("s{n}");
    let passage = match (req.passage_id, req.passage_text) {
        (Some(id), None) => st.passages.get(&id).cloned().ok_or_else(|| ApiError::not_found(format!("unknown passage {id}")))?,
        (None, Some(text)) if !text.trim().is_empty() => Passage::new(format!("{session_id}-passage"), "", text),
        (None, Some(_)) => return Err(ApiError::bad_request("passage_text is empty")),
        _ => return Err(ApiError::bad_request("give exactly one of passage_id and passage_text")),
    };
    let conv = Conversation { id: session_id.clone(), topic: None, passage, turns: Vec::new() };
    let session = Arc::new(Mutex::new(Session { conv, traces: Vec::new() }));
    st.sessions.write().expect("session map").insert(session_id.clone(), session);
    Ok((StatusCode::CREATED, Json(SessionCreated { session_id })).into_response())
}

async fn ask(State(st): State<Arc<AppState>>, Path(id): Path<String>, Json(req): Json<Ask>) -> Result<Response, ApiError> {
    if req.text.trim().is_empty() {
        return Err(ApiError::bad_request("question text is empty"));
    }
    let session = st.session(&id)?;
    let mut s = session.lock().await;
    let i = s.conv.turns.len();
    s.conv.turns.push(Turn {
        id: format!("{id}_q{}", i + 1),
        question: req.text,
        gold_answers: Vec::new(),
        feature: DialogFeature::FirstQuestion,
        planted_required_entities: None,
        injected_history: Vec::new(),
    });
    s.conv.turns[i].feature = tag_features(&s.conv)[i];
    let aug = augment_conversation(&s.conv);
    let out = match run_turn(&s.conv, &aug, i, &st.models, &st.cfg, &RunOptions::default()) {
        Ok(o) => o,
        Err(e) => {
            s.conv.turns.pop();
            return Err(ApiError::internal(e));
        }
    };
    // later turns see the predicted answer as this turn's answer
    if let Some(p) = &out.prediction {
        s.conv.turns[i].gold_answers = vec![p.span.clone()];
    }
    let raw = |v: String| RawValue::from_string(v).map_err(ApiError::internal);
    let trace = raw(serde_json::to_string(&out.trace).map_err(ApiError::internal)?)?;
    let answer = raw(serde_json::to_string(&out.trace.answer).map_err(ApiError::internal)?)?;
    let labels = raw(serde_json::to_string(&out.trace.token_labels).map_err(ApiError::internal)?)?;
    let body = serde_json::to_string(&AskResponse { answer: &answer, trace: &trace, token_labels: &labels }).map_err(ApiError::internal)?;
    s.traces.push(trace);
    Ok(json_bytes(body))
}

async fn get_trace(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = st.session(&id)?;
    let s = session.lock().await;
    let body = serde_json::to_string(&TraceResponse { session_id: &id, passage_id: &s.conv.passage.id, turns: &s.traces })
        .map_err(ApiError::internal)?;
    Ok(json_bytes(body))
}

async fn delete_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    match st.sessions.write().expect("session map").remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::not_found(format!("unknown session {id}"))),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/passages", get(list_passages))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", axum::routing::delete(delete_session))
        .route("/sessions/{id}/questions", post(ask))
        .route("/sessions/{id}/trace", get(get_trace))
        .with_state(state)
}

/// Binds `host:port` and serves until the process ends.
pub async fn serve_api(host: &str, port: u16, models: Models, cfg: PipelineConfig, corpus: &[Conversation]) -> anyhow::Result<()> {
    let state = Arc::new(AppState::new(models, cfg, corpus));
    let listener = tokio::net::TcpListener::bind((host, port))
        .await
        .map_err(|e| anyhow::anyhow!("cannot bind {host}:{port}: {e}"))?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
