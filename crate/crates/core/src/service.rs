//! JSON-over-HTTP sessions.
//!
//! A session owns one dataset split and one model. Synthetic pools and
//! actual b-perturbations are cached per session, so re-explaining an
//! observation with different regression settings skips the model-heavy
//! steps. A session's dataset and model never change, so its caches never
//! go stale.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::batch::{apply_overrides, mean_and_standard_error, render_report, BatchResult, ObservationResult, ReportFormat, SeedResult, Timing, SCHEMA_VERSION};
use crate::dataset::{FeatureKind, Observation};
use crate::error::Error;
use crate::estimator::{estimate_b_perturbation, fidelity_error, percent_fidelity, FidelityRecord};
use crate::explain::{actual_perturbations, build_pool, explain_with, Explanation, PoolKey, RunConfig, TargetPerturbations};
use crate::neighbourhood::NeighbourhoodDataset;
use crate::project::{DataSource, ModelSource, Project, ProjectSpec};
use crate::synthgen::SyntheticPool;

/// An error as the service reports it: a status and a JSON body.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: String,
    pub message: String,
}

impl ApiError {
    fn not_found(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            kind: "not_found".into(),
            message: message.into(),
        }
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            kind: "invalid_request".into(),
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidArgument(_)
            | Error::Schema(_)
            | Error::MissingColumn(_)
            | Error::UnparseableNumber { .. }
            | Error::UnknownLevel { .. }
            | Error::UnknownFeature(_)
            | Error::NotNumeric(_)
            | Error::Arity { .. }
            | Error::Csv(_)
            | Error::Io { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError {
            status,
            kind: e.kind().into(),
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"kind": self.kind, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

struct Stored {
    explanation: Explanation,
    neighbourhoods: Vec<NeighbourhoodDataset>,
    config: RunConfig,
}

#[derive(Default)]
struct Caches {
    pools: HashMap<PoolKey, Arc<SyntheticPool>>,
    actuals: HashMap<(usize, String), Arc<Vec<TargetPerturbations>>>,
    /// Raw observations posted by value, keyed by their cell strings.
    custom: BTreeMap<Vec<String>, usize>,
    explanations: BTreeMap<usize, Stored>,
    config: RunConfig,
}

struct Session {
    id: String,
    project: Project,
    caches: Mutex<Caches>,
}

impl Session {
    fn observation(&self, caches: &Caches, id: usize) -> Option<Observation> {
        if id < self.project.test.len() {
            return Some(self.project.test.rows[id].clone());
        }
        let cells = caches.custom.iter().find(|(_, &v)| v == id)?.0;
        self.project.train.observation_from_strings(cells).ok()
    }
}

#[derive(Clone, Default)]
pub struct AppState {
    sessions: Arc<Mutex<HashMap<String, Arc<Session>>>>,
    next_id: Arc<Mutex<u64>>,
}

impl AppState {
    fn session(&self, id: &str) -> ApiResult<Arc<Session>> {
        self.sessions
            .lock()
            .expect("session map")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session `{id}`")))
    }
}

pub fn router() -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/:id/explain", post(explain))
        .route("/sessions/:id/simplify", post(simplify))
        .route("/sessions/:id/neighbourhood/:obs", get(neighbourhood))
        .route("/sessions/:id/report", get(report))
        .with_state(AppState::default())
}

pub async fn serve(addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router()).await
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        kind: "internal".into(),
        message: e.to_string(),
    })?
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::unprocessable(format!("request body: {e}")))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    dataset: DataSource,
    #[serde(default)]
    model: ModelSource,
    #[serde(default)]
    test_fraction: Option<f64>,
    #[serde(default)]
    split_seed: u64,
    #[serde(default)]
    config: serde_json::Map<String, Value>,
}

async fn create_session(State(state): State<AppState>, body: axum::body::Bytes) -> ApiResult<impl IntoResponse> {
    let req: CreateSession = parse_body(&body)?;
    let config = apply_overrides(&RunConfig::default(), &req.config)?;
    let spec = ProjectSpec {
        dataset: req.dataset,
        model: req.model,
        test_fraction: req.test_fraction.unwrap_or(0.2),
        split_seed: req.split_seed,
    };
    let project = blocking(move || Project::open(&spec).map_err(ApiError::from)).await?;
    let id = {
        let mut n = state.next_id.lock().expect("id counter");
        *n += 1;
        format!("s{}", *n)
    };
    let features: Vec<Value> = project
        .train
        .features
        .iter()
        .map(|f| {
            json!({
                "name": f.name,
                "kind": f.kind,
                "levels": f.levels,
                "min": f.train_min,
                "max": f.train_max,
                "mean": f.mean,
                "stddev": f.stddev,
            })
        })
        .collect();
    let body = json!({
        "schema_version": SCHEMA_VERSION,
        "session_id": id,
        "features": features,
        "classes": project.train.class_names,
        "train_rows": project.train.len(),
        "test_rows": project.test.len(),
        "model": project.model.description(),
        "config": config,
    });
    let session = Arc::new(Session {
        id: id.clone(),
        project,
        caches: Mutex::new(Caches {
            config,
            ..Default::default()
        }),
    });
    state.sessions.lock().expect("session map").insert(id, session);
    Ok((StatusCode::CREATED, Json(body)))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ObservationRef {
    Index(usize),
    Values(Vec<String>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExplainRequest {
    observation: ObservationRef,
    #[serde(default)]
    overrides: serde_json::Map<String, Value>,
    #[serde(default)]
    seed: Option<u64>,
}

async fn explain(State(state): State<AppState>, Path(id): Path<String>, body: axum::body::Bytes) -> ApiResult<Response> {
    let session = state.session(&id)?;
    let req: ExplainRequest = parse_body(&body)?;
    let (body, hit) = blocking(move || explain_blocking(&session, req)).await?;
    let mut resp = Json(body).into_response();
    resp.headers_mut()
        .insert("x-cache", HeaderValue::from_static(if hit { "hit" } else { "miss" }));
    Ok(resp)
}

fn explain_blocking(session: &Session, req: ExplainRequest) -> ApiResult<(Value, bool)> {
    let project = &session.project;
    // one explain at a time per session
    let mut caches = session.caches.lock().expect("session caches");
    let cfg = apply_overrides(&caches.config, &req.overrides)?;
    let (obs_id, x) = match req.observation {
        ObservationRef::Index(i) => {
            if i >= project.test.len() {
                return Err(ApiError::not_found(format!("no test observation {i}")));
            }
            (i, project.test.rows[i].clone())
        }
        ObservationRef::Values(cells) => {
            let x = project.train.observation_from_strings(&cells)?;
            let next = project.test.len() + caches.custom.len();
            (*caches.custom.entry(cells).or_insert(next), x)
        }
    };
    let seed = req.seed.unwrap_or(cfg.seeds[0]);

    let key = (obs_id, serde_json::to_string(&cfg.search).unwrap_or_default());
    let mut hit = true;
    let actuals = match caches.actuals.get(&key) {
        Some(a) => a.clone(),
        None => {
            hit = false;
            let a = Arc::new(actual_perturbations(&x, &project.model, &project.train, &cfg.search)?);
            caches.actuals.insert(key, a.clone());
            a
        }
    };
    let pool_key = cfg.pool_key(seed);
    let pool = match caches.pools.get(&pool_key) {
        Some(p) => p.clone(),
        None => {
            hit = false;
            let p = Arc::new(build_pool(pool_key, &project.train, &project.model)?);
            caches.pools.insert(pool_key, p.clone());
            p
        }
    };
    let (explanation, neighbourhoods) = explain_with(&x, &project.model, &project.train, &cfg, &pool, &actuals)?;
    let body = explanation_body(&session.id, obs_id, &explanation, &cfg);
    caches.explanations.insert(
        obs_id,
        Stored {
            explanation,
            neighbourhoods,
            config: cfg.clone(),
        },
    );
    caches.config = cfg;
    Ok((body, hit))
}

fn explanation_body(session: &str, obs: usize, e: &Explanation, cfg: &RunConfig) -> Value {
    json!({
        "schema_version": SCHEMA_VERSION,
        "session_id": session,
        "observation_id": obs,
        "threshold": cfg.threshold,
        "explanation": e,
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SimplifyRequest {
    observation: usize,
    keep: Vec<String>,
    #[serde(default)]
    target_class: Option<usize>,
}

async fn simplify(State(state): State<AppState>, Path(id): Path<String>, body: axum::body::Bytes) -> ApiResult<Json<Value>> {
    let session = state.session(&id)?;
    let req: SimplifyRequest = parse_body(&body)?;
    if req.keep.is_empty() {
        return Err(ApiError::unprocessable("keep must name at least one feature"));
    }
    let caches = session.caches.lock().expect("session caches");
    let stored = caches
        .explanations
        .get(&req.observation)
        .ok_or_else(|| ApiError::not_found(format!("observation {} has not been explained", req.observation)))?;
    let x = session
        .observation(&caches, req.observation)
        .ok_or_else(|| ApiError::not_found(format!("no observation {}", req.observation)))?;
    let threshold = stored.config.threshold;
    let mut classes = Vec::new();
    for c in &stored.explanation.classes {
        if req.target_class.is_some_and(|t| t != c.target_class) {
            continue;
        }
        let simplified = c.surrogate.simplify(&req.keep, &x)?;
        let estimates: Vec<_> = c
            .b_perturbations
            .iter()
            .map(|bp| estimate_b_perturbation(&simplified, bp, stored.config.search.threshold))
            .collect();
        let fidelity: Vec<FidelityRecord> = c
            .b_perturbations
            .iter()
            .zip(&estimates)
            .map(|(bp, est)| fidelity_error(bp, est, threshold))
            .collect();
        classes.push(json!({
            "target_class": c.target_class,
            "class_name": c.class_name,
            "equation": simplified.equation(),
            "surrogate": simplified,
            "estimates": estimates,
            "fidelity": fidelity,
            "percent_fidelity": percent_fidelity(&fidelity, threshold).ok(),
            "percent_fidelity_before": c.percent_fidelity,
        }));
    }
    if classes.is_empty() {
        return Err(ApiError::not_found("no explanation for that target class"));
    }
    Ok(Json(json!({
        "schema_version": SCHEMA_VERSION,
        "session_id": session.id,
        "observation_id": req.observation,
        "keep": req.keep,
        "classes": classes,
    })))
}

async fn neighbourhood(State(state): State<AppState>, Path((id, obs)): Path<(String, usize)>) -> ApiResult<Json<Value>> {
    let session = state.session(&id)?;
    let caches = session.caches.lock().expect("session caches");
    let stored = caches
        .explanations
        .get(&obs)
        .ok_or_else(|| ApiError::not_found(format!("observation {obs} has not been explained")))?;
    let train = &session.project.train;
    let x = session.observation(&caches, obs).map(|x| train.to_analysis(&x));
    let nbds: Vec<Value> = stored
        .neighbourhoods
        .iter()
        .map(|n| {
            json!({
                "target_class": n.target_class,
                "balanced": n.balanced,
                "b1": n.b1,
                "b2": n.b2,
                "band_counts": n.band_counts(),
                "shortfall": n.shortfall,
                "points": n.points.iter().map(|p| train.to_analysis(p)).collect::<Vec<_>>(),
                "responses": n.responses,
                "bands": n.band_of,
                "weights": n.weights,
                "counterfactual": n.is_counterfactual,
            })
        })
        .collect();
    Ok(Json(json!({
        "schema_version": SCHEMA_VERSION,
        "session_id": session.id,
        "observation_id": obs,
        "features": train.feature_names(),
        "numeric": train.features.iter().map(|f| f.kind == FeatureKind::Numeric).collect::<Vec<_>>(),
        "x": x,
        "neighbourhoods": nbds,
    })))
}

#[derive(Deserialize)]
struct ReportQuery {
    #[serde(default)]
    format: Option<String>,
}

/// Every stored explanation of the session, grouped by seed.
async fn report(State(state): State<AppState>, Path(id): Path<String>, Query(q): Query<ReportQuery>) -> ApiResult<Response> {
    let session = state.session(&id)?;
    let format: ReportFormat = q.format.as_deref().unwrap_or("json").parse()?;
    let caches = session.caches.lock().expect("session caches");
    let mut by_seed: BTreeMap<u64, Vec<ObservationResult>> = BTreeMap::new();
    for (&obs, s) in &caches.explanations {
        by_seed.entry(s.explanation.seed).or_default().push(ObservationResult {
            observation: obs,
            explanation: s.explanation.clone(),
        });
    }
    let threshold = caches.config.threshold;
    let seeds: Vec<SeedResult> = by_seed
        .into_iter()
        .map(|(seed, observations)| {
            let records: Vec<FidelityRecord> = observations
                .iter()
                .flat_map(|o| o.explanation.fidelity_records().cloned())
                .collect();
            let feasible: Vec<&FidelityRecord> = records.iter().filter(|r| r.feasible).collect();
            SeedResult {
                seed,
                percent_fidelity: percent_fidelity(&records, threshold).ok(),
                feasible_records: feasible.len(),
                within_threshold: feasible.iter().filter(|r| r.error < threshold).count(),
                observations,
            }
        })
        .collect();
    let summary = mean_and_standard_error(&seeds.iter().filter_map(|s| s.percent_fidelity).collect::<Vec<_>>());
    let result = BatchResult {
        schema_version: SCHEMA_VERSION,
        name: format!("session {}", session.id),
        config: caches.config.clone(),
        seeds,
        mean_percent_fidelity: summary.map(|s| s.0),
        standard_error: summary.map(|s| s.1),
        mean_abs_error_at_x: None,
        failures: Vec::new(),
        timing: Timing::default(),
    };
    let text = render_report(&result, format)?;
    let content_type = match format {
        ReportFormat::Json => "application/json",
        ReportFormat::Csv => "text/csv",
        ReportFormat::Html => "text/html; charset=utf-8",
    };
    Ok(([(header::CONTENT_TYPE, content_type)], text).into_response())
}
