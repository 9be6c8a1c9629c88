//! Request and response bodies of the HTTP service, shared by server and client.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusFormat, EntityType, SchemeChoice, TaggedSentence};
use crate::eval::MatchMode;
use crate::experiment::RunResult;
use crate::llm::EmbeddingConfig;
use crate::parse::ParseReport;
use crate::prompt::PromptTemplate;
use crate::report::ReportFormat;
use crate::selector::Strategy;
use crate::stratify::{StratifiedDataset, TypeCoverage};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParseCorpusRequest {
    pub text: String,
    pub format: CorpusFormat,
    #[serde(default)]
    pub scheme: SchemeChoice,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratifyRequest {
    pub corpus: ParseCorpusRequest,
    /// Defaults to the standard pool size.
    pub target_size: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratifyResponse {
    pub pool: StratifiedDataset,
    pub coverage: BTreeMap<EntityType, TypeCoverage>,
    /// Malformed tag transitions repaired while decoding the corpus.
    pub repairs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectRequest {
    pub pool: StratifiedDataset,
    pub input: TaggedSentence,
    pub strategy: Strategy,
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub input_index: usize,
    /// Required for the embedding strategy.
    pub embedding: Option<EmbeddingConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptRequest {
    /// Inline template; wins over `template_name`.
    pub template: Option<PromptTemplate>,
    pub template_name: Option<String>,
    /// Domain for the generic template used when neither template field is set.
    pub domain: Option<String>,
    pub examples: Vec<TaggedSentence>,
    /// Ids recorded in the rendered prompt; defaults to each example's `id`.
    pub example_ids: Option<Vec<usize>>,
    pub input: TaggedSentence,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParseCompletionRequest {
    pub completion: String,
    pub labels: BTreeSet<EntityType>,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRequest {
    pub predictions: Vec<ParseReport>,
    pub gold: Vec<TaggedSentence>,
    #[serde(default)]
    pub match_mode: MatchMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunStatus {
    pub id: String,
    pub state: JobState,
    pub result: Option<RunResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRequest {
    #[serde(default)]
    pub results: Vec<RunResult>,
    /// Finished server-side runs to include alongside `results`.
    #[serde(default)]
    pub run_ids: Vec<String>,
    pub format: ReportFormat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
