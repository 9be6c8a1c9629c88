//! Experiment runner: k-sweeps over a fixed few-shot pool.
//!
//! For every k each test sentence goes through select → prompt → complete →
//! parse, and the k-point is scored once all sentences are in. Every artifact
//! (pool, selections, prompts, completions, parses, reports) is written under
//! `<output_dir>/<run label>/`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{Corpus, CorpusFormat, EntityType, SchemeChoice, TaggedSentence};
use crate::error::{Error, Result};
use crate::eval::{evaluate_with, EvalReport, MatchMode};
use crate::fsutil::write_atomic;
use crate::llm::{CompletionRecord, EmbeddingConfig, HttpEmbeddingProvider, LlmClient, LlmConfig};
use crate::parse::{parse_completion, ParseReport};
use crate::prompt::{build_prompt_with_ids, PromptTemplate, RenderedPrompt};
use crate::report::{report, ReportFormat};
use crate::selector::{select, select_embedding, EmbeddingCache, SelectionConfig, SelectionResult, Strategy};
use crate::stratify::{build_stratified, StratifiedDataset, DEFAULT_POOL_SIZE};
use crate::tfidf::TfIdfModel;

pub const DEFAULT_K_VALUES: [usize; 6] = [1, 5, 10, 20, 40, 80];

/// Few-shot pool size: a fixed number of stratified examples or every annotated sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "PoolSizeRepr", into = "PoolSizeRepr")]
pub enum PoolSize {
    Fixed(usize),
    Full,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PoolSizeRepr {
    Number(usize),
    Text(String),
}

impl TryFrom<PoolSizeRepr> for PoolSize {
    type Error = Error;

    fn try_from(value: PoolSizeRepr) -> Result<Self> {
        match value {
            PoolSizeRepr::Number(0) => Err(Error::Config("pool size must be at least 1".into())),
            PoolSizeRepr::Number(n) => Ok(PoolSize::Fixed(n)),
            PoolSizeRepr::Text(s) => s.parse(),
        }
    }
}

impl From<PoolSize> for PoolSizeRepr {
    fn from(value: PoolSize) -> Self {
        match value {
            PoolSize::Fixed(n) => PoolSizeRepr::Number(n),
            PoolSize::Full => PoolSizeRepr::Text("full".into()),
        }
    }
}

impl FromStr for PoolSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(PoolSize::Full);
        }
        match s.parse::<usize>() {
            Ok(0) | Err(_) => Err(Error::Config(format!("invalid pool size {s:?}"))),
            Ok(n) => Ok(PoolSize::Fixed(n)),
        }
    }
}

impl fmt::Display for PoolSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoolSize::Fixed(n) => write!(f, "{n}"),
            PoolSize::Full => f.write_str("full"),
        }
    }
}

impl Default for PoolSize {
    fn default() -> Self {
        PoolSize::Fixed(DEFAULT_POOL_SIZE)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Optional prefix for the run label.
    pub name: Option<String>,
    /// Annotated corpus the pool is stratified from.
    pub train_path: Option<PathBuf>,
    /// Pre-built pool; when set, `train_path` and `pool_size` are not used to build one.
    pub few_shot_path: Option<PathBuf>,
    pub test_path: PathBuf,
    /// Corpus format; detected from each file's extension when absent.
    pub format: Option<CorpusFormat>,
    pub scheme: SchemeChoice,
    pub strategy: Strategy,
    pub k_values: Vec<usize>,
    pub pool_size: PoolSize,
    pub seed: u64,
    pub llm: LlmConfig,
    pub embedding: Option<EmbeddingConfig>,
    /// Template JSON file. Takes precedence over `template`.
    pub template_path: Option<PathBuf>,
    /// Built-in template name (`fabner`, `thin-film`, `assembly`).
    pub template: Option<String>,
    /// Domain used by the generic template when no template is given.
    pub domain: String,
    pub output_dir: PathBuf,
    /// Completion and TF-IDF cache; defaults to `<output_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
    /// Evaluate only the first n test sentences.
    pub test_limit: Option<usize>,
    pub match_mode: MatchMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: None,
            train_path: None,
            few_shot_path: None,
            test_path: PathBuf::new(),
            format: None,
            scheme: SchemeChoice::Auto,
            strategy: Strategy::Tfidf,
            k_values: DEFAULT_K_VALUES.to_vec(),
            pool_size: PoolSize::default(),
            seed: 0,
            llm: LlmConfig::default(),
            embedding: None,
            template_path: None,
            template: None,
            domain: "industrial manufacturing".into(),
            output_dir: PathBuf::from("runs"),
            cache_dir: None,
            test_limit: None,
            match_mode: MatchMode::Exact,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_values.is_empty() {
            return Err(Error::Config("k_values must not be empty".into()));
        }
        if self.k_values[0] == 0 || self.k_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("k_values must be positive and strictly ascending".into()));
        }
        if self.train_path.is_none() && self.few_shot_path.is_none() {
            return Err(Error::Config("either train_path or few_shot_path is required".into()));
        }
        if self.strategy == Strategy::Embedding && self.embedding.is_none() {
            return Err(Error::Config("embedding strategy requires an embedding config".into()));
        }
        let files = [
            Some(&self.test_path),
            self.train_path.as_ref(),
            self.few_shot_path.as_ref(),
            self.template_path.as_ref(),
        ];
        for path in files.into_iter().flatten() {
            if !path.is_file() {
                return Err(Error::Config(format!("file not found: {}", path.display())));
            }
        }
        self.llm.validate()
    }

    pub fn run_label(&self) -> String {
        let base = format!("{}-pool{}", self.strategy, self.pool_size);
        match &self.name {
            Some(name) if !name.is_empty() => format!("{name}-{base}"),
            _ => base,
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(self.run_label())
    }

    pub fn effective_cache_dir(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("cache"))
    }
}

/// One configuration per (strategy, pool size) pair, in the given order.
pub fn expand_sweep(base: &ExperimentConfig, strategies: &[Strategy], pool_sizes: &[PoolSize]) -> Vec<ExperimentConfig> {
    let strategies = if strategies.is_empty() { vec![base.strategy] } else { strategies.to_vec() };
    let pool_sizes = if pool_sizes.is_empty() { vec![base.pool_size] } else { pool_sizes.to_vec() };
    let mut out = Vec::new();
    for &pool_size in &pool_sizes {
        for &strategy in &strategies {
            out.push(ExperimentConfig {
                strategy,
                pool_size,
                ..base.clone()
            });
        }
    }
    out
}

/// Pool, test slice and template resolved from a configuration.
#[derive(Debug, Clone)]
pub struct ExperimentInputs {
    pub pool: StratifiedDataset,
    pub test: Vec<TaggedSentence>,
    pub template: PromptTemplate,
}

impl ExperimentInputs {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let read = |path: &Path| Corpus::load(path, cfg.format, cfg.scheme);
        let train = cfg.train_path.as_deref().map(read).transpose()?;
        let test = read(&cfg.test_path)?;
        let pool = match (&cfg.few_shot_path, &train) {
            (Some(path), _) => load_pool(path, cfg)?,
            (None, Some(train)) => {
                let size = match cfg.pool_size {
                    PoolSize::Fixed(n) => n,
                    PoolSize::Full => train.len(),
                };
                build_stratified(train, size)?
            }
            (None, None) => return Err(Error::Config("no pool source".into())),
        };
        let mut labels: BTreeSet<EntityType> = test.label_set.clone();
        labels.extend(pool.label_set());
        if let Some(train) = &train {
            labels.extend(train.label_set.iter().cloned());
        }
        let template = match (&cfg.template_path, &cfg.template) {
            (Some(path), _) => PromptTemplate::load(path)?,
            (None, Some(name)) => PromptTemplate::builtin(name)?,
            (None, None) => PromptTemplate::generic(&cfg.domain, &labels),
        }
        .reconcile(&labels)?;
        Self::new(pool, test.sentences, template, cfg.test_limit)
    }

    pub fn new(
        pool: StratifiedDataset,
        mut test: Vec<TaggedSentence>,
        template: PromptTemplate,
        test_limit: Option<usize>,
    ) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::Config("few-shot pool is empty".into()));
        }
        if let Some(n) = test_limit {
            test.truncate(n);
        }
        Ok(ExperimentInputs { pool, test, template })
    }
}

fn load_pool(path: &Path, cfg: &ExperimentConfig) -> Result<StratifiedDataset> {
    let format = cfg.format.unwrap_or_else(|| CorpusFormat::from_path(path));
    match format {
        CorpusFormat::Jsonl => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            StratifiedDataset::from_jsonl(&text)
        }
        CorpusFormat::Conll => Ok(StratifiedDataset::from_corpus(Corpus::load(path, Some(format), cfg.scheme)?)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KPointResult {
    pub k: usize,
    /// All test sentences were processed.
    pub complete: bool,
    pub error: Option<String>,
    /// Sentences scored (a prefix of the test slice when incomplete).
    pub n_evaluated: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub run_label: String,
    /// Actual number of pool examples.
    pub pool_len: usize,
    pub model: String,
    pub points: Vec<KPointResult>,
    pub wall_time_ms: u64,
    pub backend_calls: usize,
    pub cache_hits: usize,
    pub cache_hit_ratio: f64,
}

impl RunResult {
    pub fn is_complete(&self) -> bool {
        self.points.iter().all(|p| p.complete)
    }
}

/// Everything produced for one test sentence at one k.
#[derive(Debug, Clone)]
pub struct SentenceOutcome {
    pub input_index: usize,
    pub selection: SelectionResult,
    pub prompt: RenderedPrompt,
    pub record: CompletionRecord,
    pub parsed: ParseReport,
}

pub async fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let inputs = ExperimentInputs::load(cfg)?;
    run_with_inputs(cfg, &inputs).await
}

/// Runs every k of `cfg` over already-resolved inputs.
pub async fn run_with_inputs(cfg: &ExperimentConfig, inputs: &ExperimentInputs) -> Result<RunResult> {
    let started = Instant::now();
    let cache_dir = cfg.effective_cache_dir();
    let run_dir = cfg.run_dir();
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    write_atomic(&run_dir.join("pool.jsonl"), inputs.pool.to_jsonl().as_bytes())?;
    write_atomic(
        &run_dir.join("template.json"),
        &serde_json::to_vec_pretty(&inputs.template)?,
    )?;

    let model = if cfg.strategy.needs_tfidf() {
        Some(TfIdfModel::load_or_fit(&cache_dir, &inputs.pool.examples)?)
    } else {
        None
    };
    let embedder = match (&cfg.strategy, &cfg.embedding) {
        (Strategy::Embedding, Some(ecfg)) => Some(HttpEmbeddingProvider::new(ecfg)?),
        _ => None,
    };
    let embed_cache = EmbeddingCache::new();
    let llm = LlmClient::new(cfg.llm.clone(), Some(cache_dir))?;
    let labels = inputs.template.label_set();

    let mut points = Vec::with_capacity(cfg.k_values.len());
    for &k in &cfg.k_values {
        let ctx = PointContext {
            cfg,
            inputs,
            model: model.as_ref(),
            embedder: embedder.as_ref(),
            embed_cache: &embed_cache,
            llm: &llm,
            labels: &labels,
            k,
        };
        let (outcomes, error) = ctx.run().await;
        let gold: Vec<TaggedSentence> = inputs.test[..outcomes.len()].to_vec();
        let parsed: Vec<ParseReport> = outcomes.iter().map(|o| o.parsed.clone()).collect();
        let report = evaluate_with(&parsed, &gold, cfg.match_mode)?;
        let point = KPointResult {
            k,
            complete: error.is_none(),
            error: error.map(|e| e.to_string()),
            n_evaluated: outcomes.len(),
            report,
        };
        persist_point(&run_dir.join(format!("k{k}")), &outcomes, &point)?;
        if let Some(err) = &point.error {
            tracing::error!(k, error = %err, "k-point aborted");
        }
        points.push(point);
    }

    let stats = llm.stats();
    let total = stats.backend_calls + stats.cache_hits;
    let result = RunResult {
        config: cfg.clone(),
        run_label: cfg.run_label(),
        pool_len: inputs.pool.len(),
        model: cfg.llm.display_model(),
        points,
        wall_time_ms: started.elapsed().as_millis() as u64,
        backend_calls: stats.backend_calls,
        cache_hits: stats.cache_hits,
        cache_hit_ratio: if total == 0 { 0.0 } else { stats.cache_hits as f64 / total as f64 },
    };
    write_atomic(&run_dir.join("run.json"), &serde_json::to_vec_pretty(&result)?)?;
    write_atomic(
        &run_dir.join("summary.csv"),
        report(std::slice::from_ref(&result), ReportFormat::Csv).as_bytes(),
    )?;
    Ok(result)
}

struct PointContext<'a> {
    cfg: &'a ExperimentConfig,
    inputs: &'a ExperimentInputs,
    model: Option<&'a TfIdfModel>,
    embedder: Option<&'a HttpEmbeddingProvider>,
    embed_cache: &'a EmbeddingCache,
    llm: &'a LlmClient,
    labels: &'a BTreeSet<EntityType>,
    k: usize,
}

impl PointContext<'_> {
    /// Processes the test slice in order with bounded concurrency. Stops at the
    /// first failure and returns the outcomes gathered before it.
    async fn run(&self) -> (Vec<SentenceOutcome>, Option<Error>) {
        // Futures are created eagerly (they are lazy until polled); keeping the
        // mapping closure out of the stream type keeps the run future `Send`.
        let pending: Vec<_> = self.inputs.test.iter().enumerate().map(|(i, s)| self.one(i, s)).collect();
        let mut stream = stream::iter(pending).buffered(self.cfg.llm.concurrency.max(1));
        let mut outcomes = Vec::with_capacity(self.inputs.test.len());
        while let Some(res) = stream.next().await {
            match res {
                Ok(o) => outcomes.push(o),
                Err(e) => return (outcomes, Some(e)),
            }
        }
        (outcomes, None)
    }

    async fn one(&self, input_index: usize, input: &TaggedSentence) -> Result<SentenceOutcome> {
        let sel_cfg = SelectionConfig {
            strategy: self.cfg.strategy,
            k: self.k,
            seed: self.cfg.seed,
            input_index,
        };
        let pool = &self.inputs.pool;
        let selection = match (self.cfg.strategy, self.embedder) {
            (Strategy::Embedding, Some(provider)) => {
                select_embedding(pool, provider, self.embed_cache, input, &sel_cfg).await?
            }
            _ => select(pool, self.model, input, &sel_cfg)?,
        };
        let examples = selection.examples(pool);
        let prompt = build_prompt_with_ids(&self.inputs.template, &examples, selection.chosen.clone(), input);
        let record = self.llm.complete(&prompt, Some(input), self.labels).await?;
        let parsed = parse_completion(&record.completion, self.labels, &input.tokens);
        Ok(SentenceOutcome {
            input_index,
            selection,
            prompt,
            record,
            parsed,
        })
    }
}

fn jsonl<T: Serialize>(rows: impl Iterator<Item = T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, &row)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn persist_point(dir: &Path, outcomes: &[SentenceOutcome], point: &KPointResult) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let selections = jsonl(outcomes.iter().map(|o| {
        json!({ "input_index": o.input_index, "selection": o.selection })
    }))?;
    let prompts = jsonl(outcomes.iter().map(|o| {
        json!({
            "input_index": o.input_index,
            "example_ids": o.prompt.example_ids,
            "token_estimate": o.prompt.token_estimate,
            "prompt_hash": o.record.prompt_hash,
            "text": o.prompt.text,
        })
    }))?;
    let completions = jsonl(outcomes.iter().map(|o| {
        json!({
            "input_index": o.input_index,
            "prompt_hash": o.record.prompt_hash,
            "completion": o.record.completion,
        })
    }))?;
    let parsed = jsonl(outcomes.iter().map(|o| json!({ "input_index": o.input_index, "parse": o.parsed })))?;
    write_atomic(&dir.join("selections.jsonl"), &selections)?;
    write_atomic(&dir.join("prompts.jsonl"), &prompts)?;
    write_atomic(&dir.join("completions.jsonl"), &completions)?;
    write_atomic(&dir.join("parsed.jsonl"), &parsed)?;
    write_atomic(&dir.join("report.json"), &serde_json::to_vec_pretty(point)?)?;
    Ok(())
}
