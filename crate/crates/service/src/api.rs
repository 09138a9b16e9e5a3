//! HTTP API for the review console.

use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use udrt_core::classifier::Verdict;
use udrt_core::decision::{DefectClass, ExpertLabel, TrackDecision};
use udrt_core::ingest::{apparent_depth_mm, ProbeAngle};
use udrt_core::pipeline::{PipelineMetrics, SharedDesk, SharedMetrics};
use udrt_core::preprocess::FusionGroup;
use udrt_core::Error;

pub const SOUND_VELOCITY_M_S: f64 = 5900.0;

#[derive(Clone)]
pub struct AppState {
    pub desk: SharedDesk,
    pub metrics: SharedMetrics,
    pub live: broadcast::Sender<TrackDecision>,
    pub depth_samples: u16,
    pub sample_window_us: u16,
}

impl AppState {
    pub fn new(
        desk: SharedDesk,
        metrics: SharedMetrics,
        depth_samples: u16,
        sample_window_us: u16,
    ) -> Self {
        let (live, _) = broadcast::channel(1024);
        Self {
            desk,
            metrics,
            live,
            depth_samples,
            sample_window_us,
        }
    }

    /// Publishes a decision on the live feed; no subscribers is fine.
    pub fn publish(&self, decision: &TrackDecision) {
        let _ = self.live.send(decision.clone());
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/queue", get(queue))
        .route("/api/frames/{id}", get(frames))
        .route("/api/labels", post(labels))
        .route("/api/metrics", get(metrics))
        .route("/api/live", get(live))
        .with_state(Arc::new(state))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub kind: String,
    pub message: String,
    /// Offending request field, when one can be named.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

pub struct ApiError {
    status: StatusCode,
    kind: String,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind: kind.to_string(),
            message: message.into(),
            field: None,
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::AlreadyLabeled(_) => StatusCode::CONFLICT,
            Error::LabelOutsideClassSet { .. } | Error::InvalidConfig(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.kind(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: ErrorDetail {
                kind: self.kind,
                message: self.message,
                field: self.field,
            },
        };
        (self.status, Json(body)).into_response()
    }
}

/// One pending review item without its pixel payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub decision_id: u64,
    pub track_start_m: f64,
    pub track_end_m: f64,
    pub class: DefectClass,
    pub confidence: f64,
    pub apparent_depth_mm: f64,
    pub groups: Vec<FusionGroup>,
    pub verdicts: Vec<Verdict>,
    pub created_at_ms: u64,
}

async fn queue(State(state): State<Arc<AppState>>) -> Json<Vec<QueueEntry>> {
    let desk = state.desk.lock();
    let entries = desk
        .pending()
        .iter()
        .map(|item| {
            let d = desk.decision(item.decision_id);
            QueueEntry {
                decision_id: item.decision_id,
                track_start_m: item.track_start_m,
                track_end_m: item.track_end_m,
                class: d.map_or(DefectClass::NoIndication, |d| d.class),
                confidence: d.map_or(0.0, |d| d.confidence),
                apparent_depth_mm: d.map_or(0.0, |d| d.apparent_depth_mm),
                groups: item.contributing_groups(),
                verdicts: item.verdicts.clone(),
                created_at_ms: item.created_at_ms,
            }
        })
        .collect();
    Json(entries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMatrix {
    pub angle: ProbeAngle,
    pub track_start_m: f64,
    /// Depth rows of normalized amplitudes, each `width` long.
    pub rows: Vec<Vec<f32>>,
}

/// Constants to label the depth axis: row `i` lies at
/// `velocity · (i / depth_samples · window) / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthAxis {
    pub depth_samples: u16,
    pub sample_window_us: u16,
    pub velocity_m_s: f64,
    pub max_depth_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePayload {
    pub decision_id: u64,
    pub track_start_m: f64,
    pub track_end_m: f64,
    pub groups: Vec<FusionGroup>,
    pub channels: Vec<ChannelMatrix>,
    pub verdicts: Vec<Verdict>,
    /// Labels the expert may choose from.
    pub class_options: Vec<DefectClass>,
    pub depth: DepthAxis,
}

pub fn class_options(groups: &[FusionGroup]) -> Vec<DefectClass> {
    let mut out = vec![DefectClass::NoIndication];
    for g in groups {
        for c in g.class_set() {
            if !out.contains(c) {
                out.push(*c);
            }
        }
    }
    out
}

async fn frames(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<FramePayload>, ApiError> {
    let id: u64 = id.parse().map_err(|_| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            "invalid_id",
            format!("id: `{id}` is not a decision id"),
        )
    })?;
    let desk = state.desk.lock();
    let item = desk.item(id).ok_or(Error::NotFound(id))?;
    let groups = item.contributing_groups();
    let channels = item
        .frames
        .iter()
        .map(|f| ChannelMatrix {
            angle: f.angle,
            track_start_m: f.track_start_m,
            rows: f.data.chunks(f.width.max(1)).map(<[f32]>::to_vec).collect(),
        })
        .collect();
    let depth_samples = usize::from(state.depth_samples);
    Ok(Json(FramePayload {
        decision_id: id,
        track_start_m: item.track_start_m,
        track_end_m: item.track_end_m,
        class_options: class_options(&groups),
        groups,
        channels,
        verdicts: item.verdicts.clone(),
        depth: DepthAxis {
            depth_samples: state.depth_samples,
            sample_window_us: state.sample_window_us,
            velocity_m_s: SOUND_VELOCITY_M_S,
            max_depth_mm: apparent_depth_mm(depth_samples, depth_samples).unwrap_or(0.0),
        },
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelResponse {
    pub decision: TrackDecision,
    /// Groups whose retraining sets received the window.
    pub retrained_groups: Vec<FusionGroup>,
}

/// Parses an [`ExpertLabel`], naming the field that failed.
pub fn parse_label(body: &[u8]) -> Result<ExpertLabel, ApiError> {
    let mut de = serde_json::Deserializer::from_slice(body);
    let label: ExpertLabel = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let field = if path != "." {
            Some(path)
        } else {
            missing_field(&inner.to_string())
        };
        let message = match &field {
            Some(f) => format!("{f}: {inner}"),
            None => inner.to_string(),
        };
        ApiError {
            field,
            ..ApiError::new(StatusCode::BAD_REQUEST, "invalid_label", message)
        }
    })?;
    de.end()
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_label", e.to_string()))?;
    Ok(label)
}

fn missing_field(message: &str) -> Option<String> {
    let rest = message.strip_prefix("missing field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

async fn labels(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<Json<LabelResponse>, ApiError> {
    let label = parse_label(&body)?;
    let outcome = state.desk.lock().apply_label(label)?;
    state.publish(&outcome.decision);
    Ok(Json(LabelResponse {
        retrained_groups: outcome.entries.iter().map(|e| e.input.group).collect(),
        decision: outcome.decision,
    }))
}

async fn metrics(State(state): State<Arc<AppState>>) -> Json<PipelineMetrics> {
    let depth = state.desk.lock().pending().len();
    Json(state.metrics.lock().snapshot(depth))
}

async fn live(
    State(state): State<Arc<AppState>>,
) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = state.live.subscribe();
    let events = stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(d) => {
                    let event = Event::default()
                        .event("decision")
                        .json_data(&d)
                        .unwrap_or_else(|_| Event::default().event("error"));
                    return Some((Ok(event), rx));
                }
                // lagging clients skip what they missed
                Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    Sse::new(events).keep_alive(KeepAlive::default())
}
