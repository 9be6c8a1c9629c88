//! HTTP/JSON service over the fsponer pipeline.
//!
//! Stateless endpoints wrap single operations (corpus parsing, stratification,
//! selection, prompt rendering, completion parsing, scoring). Experiment runs
//! are jobs: `POST /runs` starts one and `GET /runs/{id}` polls it, optionally
//! blocking until it finishes.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fsponer_core::api::{
    ErrorBody, EvalRequest, Health, JobState, ParseCompletionRequest, ParseCorpusRequest, PromptRequest,
    ReportRequest, RunStatus, SelectRequest, StratifyRequest, StratifyResponse,
};
use fsponer_core::corpus::{Corpus, EntityType};
use fsponer_core::eval::{evaluate_with, EvalReport};
use fsponer_core::experiment::{run_experiment, ExperimentConfig};
use fsponer_core::llm::HttpEmbeddingProvider;
use fsponer_core::parse::{parse_completion, ParseReport};
use fsponer_core::prompt::{build_prompt, build_prompt_with_ids, PromptTemplate, RenderedPrompt};
use fsponer_core::report::{report, ReportFormat};
use fsponer_core::selector::{select, select_embedding, EmbeddingCache, SelectionConfig, SelectionResult, Strategy};
use fsponer_core::stratify::{build_stratified, coverage_report, DEFAULT_POOL_SIZE};
use fsponer_core::{Error, TfIdfModel};
use serde::Deserialize;
use tokio::sync::watch;

const BODY_LIMIT: usize = 64 * 1024 * 1024;

#[derive(Clone, Default)]
pub struct AppState {
    inner: Arc<Inner>,
}

#[derive(Default)]
struct Inner {
    jobs: RwLock<HashMap<String, watch::Receiver<RunStatus>>>,
    next_id: AtomicU64,
    /// TF-IDF models keyed by pool hash.
    models: Mutex<HashMap<String, Arc<TfIdfModel>>>,
    embeddings: EmbeddingCache,
}

impl AppState {
    fn model_for(&self, pool: &fsponer_core::StratifiedDataset) -> Result<Arc<TfIdfModel>, Error> {
        let key = TfIdfModel::pool_hash(&pool.examples);
        if let Some(model) = self.inner.models.lock().unwrap().get(&key) {
            return Ok(model.clone());
        }
        let model = Arc::new(TfIdfModel::fit(&pool.examples)?);
        self.inner.models.lock().unwrap().insert(key, model.clone());
        Ok(model)
    }

    fn job(&self, id: &str) -> Option<watch::Receiver<RunStatus>> {
        self.inner.jobs.read().unwrap().get(id).cloned()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/corpus/parse", post(parse_corpus))
        .route("/stratify", post(stratify))
        .route("/select", post(select_examples))
        .route("/prompt", post(render_prompt))
        .route("/parse", post(parse))
        .route("/eval", post(eval))
        .route("/runs", post(start_run).get(list_runs))
        .route("/runs/{id}", get(run_status))
        .route("/report", post(render_report))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(err: Error) -> Self {
        let status = match &err {
            Error::Http { .. }
            | Error::Timeout { .. }
            | Error::Transport { .. }
            | Error::BadResponse(_)
            | Error::ScriptMiss(_) => StatusCode::BAD_GATEWAY,
            Error::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError::new(status, err.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!(status = %self.status, error = %self.message, "request failed");
        }
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

fn load_corpus(req: &ParseCorpusRequest) -> Result<Corpus, Error> {
    Corpus::parse(&req.text, req.format, req.scheme)
}

async fn parse_corpus(Json(req): Json<ParseCorpusRequest>) -> ApiResult<Corpus> {
    Ok(Json(load_corpus(&req)?))
}

async fn stratify(Json(req): Json<StratifyRequest>) -> ApiResult<StratifyResponse> {
    let corpus = load_corpus(&req.corpus)?;
    let pool = build_stratified(&corpus, req.target_size.unwrap_or(DEFAULT_POOL_SIZE))?;
    let coverage = coverage_report(&pool, &corpus);
    Ok(Json(StratifyResponse {
        pool,
        coverage,
        repairs: corpus.repairs,
    }))
}

async fn select_examples(State(state): State<AppState>, Json(req): Json<SelectRequest>) -> ApiResult<SelectionResult> {
    req.input.validate()?;
    let cfg = SelectionConfig {
        strategy: req.strategy,
        k: req.k,
        seed: req.seed,
        input_index: req.input_index,
    };
    let result = match req.strategy {
        Strategy::Embedding => {
            let ecfg = req
                .embedding
                .as_ref()
                .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "embedding strategy requires an embedding config"))?;
            let provider = HttpEmbeddingProvider::new(ecfg)?;
            select_embedding(&req.pool, &provider, &state.inner.embeddings, &req.input, &cfg).await?
        }
        s if s.needs_tfidf() => {
            let model = state.model_for(&req.pool)?;
            select(&req.pool, Some(&model), &req.input, &cfg)?
        }
        _ => select(&req.pool, None, &req.input, &cfg)?,
    };
    Ok(Json(result))
}

async fn render_prompt(Json(req): Json<PromptRequest>) -> ApiResult<RenderedPrompt> {
    req.input.validate()?;
    let template = match (req.template, &req.template_name) {
        (Some(t), _) => t,
        (None, Some(name)) => PromptTemplate::builtin(name)?,
        (None, None) => {
            let labels: BTreeSet<EntityType> = req
                .examples
                .iter()
                .chain(std::iter::once(&req.input))
                .flat_map(|s| s.spans.iter().map(|sp| sp.etype.clone()))
                .collect();
            PromptTemplate::generic(req.domain.as_deref().unwrap_or("the given domain"), &labels)
        }
    };
    let examples: Vec<_> = req.examples.iter().collect();
    let prompt = match req.example_ids {
        Some(ids) if ids.len() != examples.len() => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                format!("{} example ids for {} examples", ids.len(), examples.len()),
            ))
        }
        Some(ids) => build_prompt_with_ids(&template, &examples, ids, &req.input),
        None => build_prompt(&template, &examples, &req.input),
    };
    Ok(Json(prompt))
}

async fn parse(Json(req): Json<ParseCompletionRequest>) -> ApiResult<ParseReport> {
    Ok(Json(parse_completion(&req.completion, &req.labels, &req.tokens)))
}

async fn eval(Json(req): Json<EvalRequest>) -> ApiResult<EvalReport> {
    Ok(Json(evaluate_with(&req.predictions, &req.gold, req.match_mode)?))
}

async fn start_run(
    State(state): State<AppState>,
    Json(cfg): Json<ExperimentConfig>,
) -> Result<(StatusCode, Json<RunStatus>), ApiError> {
    cfg.validate()?;
    let n = state.inner.next_id.fetch_add(1, Ordering::SeqCst) + 1;
    let id = format!("run-{n}");
    let running = RunStatus {
        id: id.clone(),
        state: JobState::Running,
        result: None,
        error: None,
    };
    let (tx, rx) = watch::channel(running.clone());
    state.inner.jobs.write().unwrap().insert(id.clone(), rx);
    tracing::info!(%id, label = %cfg.run_label(), "run started");
    tokio::spawn(async move {
        let finished = match run_experiment(&cfg).await {
            Ok(result) => RunStatus {
                id: id.clone(),
                state: JobState::Done,
                result: Some(result),
                error: None,
            },
            Err(err) => RunStatus {
                id: id.clone(),
                state: JobState::Failed,
                result: None,
                error: Some(err.to_string()),
            },
        };
        tracing::info!(%id, state = ?finished.state, "run finished");
        let _ = tx.send(finished);
    });
    Ok((StatusCode::ACCEPTED, Json(running)))
}

#[derive(Debug, Default, Deserialize)]
struct WaitQuery {
    #[serde(default)]
    wait: bool,
}

async fn run_status(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<WaitQuery>,
) -> ApiResult<RunStatus> {
    let mut rx = state
        .job(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown run {id}")))?;
    if q.wait {
        let status = rx
            .wait_for(|s| s.state != JobState::Running)
            .await
            .map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "run task ended without a status"))?
            .clone();
        return Ok(Json(status));
    }
    let status = rx.borrow().clone();
    Ok(Json(status))
}

async fn list_runs(State(state): State<AppState>) -> Json<Vec<RunStatus>> {
    let mut runs: Vec<RunStatus> = state
        .inner
        .jobs
        .read()
        .unwrap()
        .values()
        .map(|rx| {
            let mut s = rx.borrow().clone();
            s.result = None;
            s
        })
        .collect();
    runs.sort_by_key(|s| s.id.trim_start_matches("run-").parse::<u64>().unwrap_or(u64::MAX));
    Json(runs)
}

async fn render_report(State(state): State<AppState>, Json(req): Json<ReportRequest>) -> Result<Response, ApiError> {
    let mut results = req.results;
    for id in &req.run_ids {
        let rx = state
            .job(id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown run {id}")))?;
        let status = rx.borrow().clone();
        match status.result {
            Some(result) => results.push(result),
            None => {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    format!("run {id} has no result ({:?})", status.state),
                ))
            }
        }
    }
    let content_type = match req.format {
        ReportFormat::Csv => "text/csv",
        ReportFormat::Json => "application/json",
        ReportFormat::Md => "text/markdown",
    };
    Ok(([(header::CONTENT_TYPE, content_type)], report(&results, req.format)).into_response())
}
