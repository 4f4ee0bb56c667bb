//! HTTP inference service over a frozen checkpoint.

use std::hash::Hasher;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use protomail_core::corpus::{Email, Interests};
use protomail_core::edits::{suggest_edits, EditPosition, EditSuggestion, SuggestOptions};
use protomail_core::explain::{explain, ExplanationReport};
use protomail_core::model::{PreparedEmail, ProtoModel};
use protomail_core::parsing::{load_parses, ParseMap};
use protomail_core::protonet::Granularity;
use protomail_core::Error;

/// Id given to request emails; parse blocks are re-keyed to it.
pub const REQUEST_EMAIL_ID: &str = "request";

pub struct AppState {
    pub model: ProtoModel,
    pub model_version: String,
    pub suggest: SuggestOptions,
    pub default_top_n: usize,
    pub requests: AtomicU64,
}

impl AppState {
    pub fn new(model: ProtoModel, suggest: SuggestOptions, default_top_n: usize) -> Self {
        Self {
            model_version: model.version(),
            model,
            suggest,
            default_top_n,
            requests: AtomicU64::new(0),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub subject: String,
    pub body: String,
    #[serde(default)]
    pub recipient_org: Option<String>,
    #[serde(default)]
    pub interests: Option<Vec<String>>,
    /// CoNLL-U block for the subject and body sentences.
    #[serde(default)]
    pub parses: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub probability: f64,
    pub label: u8,
    pub model_version: String,
    /// `full`, or `degraded` when phrases come from fallback subgraphs.
    pub structural_view: String,
    /// Hash of subject and body; suggestions apply only to this version.
    pub text_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainResponse {
    pub report: ExplanationReport,
    pub structural_view: String,
    pub text_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuggestResponse {
    pub suggestions: Vec<EditSuggestion>,
    pub model_version: String,
    pub structural_view: String,
    pub text_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldDiagnostic {
    pub field: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    error: String,
    hint: Option<String>,
    diagnostics: Vec<FieldDiagnostic>,
}

impl ApiError {
    fn bad_request(error: impl Into<String>, diagnostics: Vec<FieldDiagnostic>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            error: error.into(),
            hint: None,
            diagnostics,
        }
    }

    fn from_core(e: Error) -> Self {
        match e {
            Error::NotProjected => Self {
                status: StatusCode::SERVICE_UNAVAILABLE,
                error: e.to_string(),
                hint: Some("train the checkpoint to completion (training ends with a projection) or run projection before serving".into()),
                diagnostics: Vec::new(),
            },
            Error::Rejected { .. } | Error::EmptyInput(_) => Self::bad_request(e.to_string(), Vec::new()),
            other => Self {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                error: other.to_string(),
                hint: None,
                diagnostics: Vec::new(),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.error });
        if let Some(h) = self.hint {
            body["hint"] = json!(h);
        }
        if !self.diagnostics.is_empty() {
            body["diagnostics"] = json!(self.diagnostics);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn text_version(subject: &str, body: &str) -> String {
    let mut h = fnv::FnvHasher::default();
    h.write(subject.as_bytes());
    h.write(&[0]);
    h.write(body.as_bytes());
    format!("{:016x}", h.finish())
}

fn parse_request<T: for<'de> Deserialize<'de>>(bytes: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| {
        let msg = e.to_string();
        let field = msg
            .split('`')
            .nth(1)
            .map_or_else(|| format!("line {} column {}", e.line(), e.column()), str::to_string);
        ApiError::bad_request(
            "malformed request body",
            vec![FieldDiagnostic {
                field,
                message: msg,
            }],
        )
    })
}

/// Builds the model input, using the request's parse block when present.
pub fn prepare_request(model: &ProtoModel, req: &PredictRequest) -> Result<PreparedEmail, ApiError> {
    let mut diags = Vec::new();
    if req.subject.trim().is_empty() && req.body.trim().is_empty() {
        diags.push(FieldDiagnostic {
            field: "body".into(),
            message: "subject and body are both empty".into(),
        });
    }
    if req.interests.is_some() && req.recipient_org.is_none() {
        diags.push(FieldDiagnostic {
            field: "interests".into(),
            message: "interests need a recipient_org".into(),
        });
    }
    let mut email = Email::new(REQUEST_EMAIL_ID, req.subject.clone(), req.body.clone());
    email.recipient_org = req.recipient_org.clone();
    email.interests = match (&req.recipient_org, &req.interests) {
        (None, _) => Interests::Absent,
        (Some(_), None) => Interests::Unknown,
        (Some(_), Some(v)) => Interests::Known(v.clone()),
    };
    if email.sentences.is_empty() && !req.body.trim().is_empty() {
        diags.push(FieldDiagnostic {
            field: "body".into(),
            message: "body has no sentences".into(),
        });
    }
    let parses = match &req.parses {
        None => None,
        Some(text) => {
            let (map, parse_diags) = load_parses(text, None);
            diags.extend(parse_diags.into_iter().map(|d| FieldDiagnostic {
                field: "parses".into(),
                message: d.to_string(),
            }));
            let rekeyed: ParseMap = map.into_iter().map(|((_, slot), g)| ((REQUEST_EMAIL_ID.to_string(), slot), g)).collect();
            Some(rekeyed)
        }
    };
    if !diags.is_empty() {
        return Err(ApiError::bad_request("invalid request", diags));
    }
    Ok(model.prepare(&email, parses.as_ref()))
}

fn view_flag(p: &PreparedEmail) -> String {
    if p.degraded { "degraded" } else { "full" }.to_string()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        error: format!("worker failed: {e}"),
        hint: None,
        diagnostics: Vec::new(),
    })?
}

async fn health(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "model_version": s.model_version,
        "projected": s.model.banks.all_projected(),
    }))
}

pub fn predict_one(model: &ProtoModel, version: &str, req: &PredictRequest) -> Result<PredictResponse, ApiError> {
    let p = prepare_request(model, req)?;
    let pr = model.predict(&p);
    Ok(PredictResponse {
        probability: pr.probabilities[1],
        label: pr.label,
        model_version: version.to_string(),
        structural_view: view_flag(&p),
        text_version: text_version(&req.subject, &req.body),
    })
}

async fn predict(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<PredictResponse> {
    s.requests.fetch_add(1, Ordering::Relaxed);
    let req: PredictRequest = parse_request(&body)?;
    blocking(move || predict_one(&s.model, &s.model_version, &req)).await.map(Json)
}

#[derive(Debug, Deserialize)]
struct ExplainQuery {
    #[serde(rename = "topN")]
    top_n: Option<usize>,
}

async fn explain_handler(
    State(s): State<Arc<AppState>>,
    Query(q): Query<ExplainQuery>,
    body: Bytes,
) -> ApiResult<ExplainResponse> {
    s.requests.fetch_add(1, Ordering::Relaxed);
    let req: PredictRequest = parse_request(&body)?;
    let top_n = q.top_n.unwrap_or(s.default_top_n);
    blocking(move || {
        let p = prepare_request(&s.model, &req)?;
        let report = explain(&s.model, &p, top_n).map_err(ApiError::from_core)?;
        Ok(ExplainResponse {
            report,
            structural_view: view_flag(&p),
            text_version: text_version(&req.subject, &req.body),
        })
    })
    .await
    .map(Json)
}

#[derive(Debug, Deserialize)]
struct SuggestQuery {
    position: Option<String>,
}

async fn suggest_handler(
    State(s): State<Arc<AppState>>,
    Query(q): Query<SuggestQuery>,
    body: Bytes,
) -> ApiResult<SuggestResponse> {
    s.requests.fetch_add(1, Ordering::Relaxed);
    let req: PredictRequest = parse_request(&body)?;
    let positions = match q.position.as_deref() {
        None | Some("all") => EditPosition::ALL.to_vec(),
        Some(name) => vec![EditPosition::parse(name).map_err(|e| {
            ApiError::bad_request(
                "invalid query",
                vec![FieldDiagnostic {
                    field: "position".into(),
                    message: e.to_string(),
                }],
            )
        })?],
    };
    blocking(move || {
        let p = prepare_request(&s.model, &req)?;
        let mut suggestions = Vec::new();
        for pos in positions {
            suggestions.extend(suggest_edits(&s.model, &p, pos, &s.suggest).map_err(ApiError::from_core)?);
        }
        suggestions.sort_by(|a, b| b.after.total_cmp(&a.after));
        Ok(SuggestResponse {
            suggestions,
            model_version: s.model_version.clone(),
            structural_view: view_flag(&p),
            text_version: text_version(&req.subject, &req.body),
        })
    })
    .await
    .map(Json)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeEntry {
    pub granularity: Granularity,
    pub index: usize,
    pub class: u8,
    pub email_id: String,
    pub unit_index: usize,
    pub surface_text: String,
    pub distance: f64,
}

async fn prototypes(State(s): State<Arc<AppState>>) -> ApiResult<serde_json::Value> {
    s.model.require_projected().map_err(ApiError::from_core)?;
    let mut out = Vec::new();
    for g in s.model.active_granularities() {
        let Some(bank) = s.model.banks.get(g) else { continue };
        for (i, pv) in bank.projection.iter().flatten().enumerate() {
            out.push(PrototypeEntry {
                granularity: g,
                index: i,
                class: bank.class_of[i],
                email_id: pv.email_id.clone(),
                unit_index: pv.unit_index,
                surface_text: pv.surface_text.clone(),
                distance: pv.distance,
            });
        }
    }
    Ok(Json(json!({ "model_version": s.model_version, "prototypes": out })))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/predict", post(predict))
        .route("/explain", post(explain_handler))
        .route("/suggest", post(suggest_handler))
        .route("/prototypes", get(prototypes))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, bind: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(address = %listener.local_addr()?, model = %state.model_version, "serving");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
