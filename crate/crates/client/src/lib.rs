//! Thin typed client for the fsponer HTTP service.

use fsponer_core::api::{
    ErrorBody, EvalRequest, Health, ParseCompletionRequest, ParseCorpusRequest, PromptRequest, ReportRequest,
    RunStatus, SelectRequest, StratifyRequest, StratifyResponse,
};
use fsponer_core::corpus::Corpus;
use fsponer_core::eval::EvalReport;
use fsponer_core::experiment::ExperimentConfig;
use fsponer_core::parse::ParseReport;
use fsponer_core::prompt::RenderedPrompt;
use fsponer_core::selector::SelectionResult;
use serde::de::DeserializeOwned;
use serde::Serialize;

pub const DEFAULT_SERVER: &str = "http://127.0.0.1:8080";

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("cannot reach server: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("server returned {status}: {message}")]
    Api { status: u16, message: String },
}

pub type Result<T, E = ClientError> = std::result::Result<T, E>;

#[derive(Debug, Clone)]
pub struct FsponerClient {
    base: String,
    http: reqwest::Client,
}

impl FsponerClient {
    pub fn new(base: impl Into<String>) -> Self {
        FsponerClient {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn check(resp: reqwest::Response) -> Result<reqwest::Response> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().await.unwrap_or_default();
        let message = serde_json::from_str::<ErrorBody>(&text).map_or(text, |b| b.error);
        Err(ClientError::Api {
            status: status.as_u16(),
            message,
        })
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let resp = self.http.post(self.url(path)).json(body).send().await?;
        Ok(Self::check(resp).await?.json().await?)
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        let resp = self.http.get(self.url(path)).send().await?;
        Ok(Self::check(resp).await?.json().await?)
    }

    pub async fn health(&self) -> Result<Health> {
        self.get("/health").await
    }

    pub async fn parse_corpus(&self, req: &ParseCorpusRequest) -> Result<Corpus> {
        self.post("/corpus/parse", req).await
    }

    pub async fn stratify(&self, req: &StratifyRequest) -> Result<StratifyResponse> {
        self.post("/stratify", req).await
    }

    pub async fn select(&self, req: &SelectRequest) -> Result<SelectionResult> {
        self.post("/select", req).await
    }

    pub async fn prompt(&self, req: &PromptRequest) -> Result<RenderedPrompt> {
        self.post("/prompt", req).await
    }

    pub async fn parse_completion(&self, req: &ParseCompletionRequest) -> Result<ParseReport> {
        self.post("/parse", req).await
    }

    pub async fn eval(&self, req: &EvalRequest) -> Result<EvalReport> {
        self.post("/eval", req).await
    }

    pub async fn start_run(&self, cfg: &ExperimentConfig) -> Result<RunStatus> {
        self.post("/runs", cfg).await
    }

    /// Current status of a run; with `wait` the call returns once the run has finished.
    pub async fn run_status(&self, id: &str, wait: bool) -> Result<RunStatus> {
        self.get(&format!("/runs/{id}?wait={wait}")).await
    }

    pub async fn list_runs(&self) -> Result<Vec<RunStatus>> {
        self.get("/runs").await
    }

    pub async fn report(&self, req: &ReportRequest) -> Result<String> {
        let resp = self.http.post(self.url("/report")).json(req).send().await?;
        Ok(Self::check(resp).await?.text().await?)
    }
}
