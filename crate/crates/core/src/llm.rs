//! Chat-completion backends with a content-addressed completion cache.
//!
//! `http` talks to any OpenAI-compatible `/chat/completions` endpoint. The mock
//! backends answer from the gold annotation of the input sentence, optionally
//! degraded by a seeded noise model, and `scripted` replays completions keyed
//! by prompt hash.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::RwLock;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use crate::corpus::{EntityType, TaggedSentence};
use crate::error::{Error, Result};
use crate::fsutil::{sha256_hex, write_atomic};
use crate::prompt::{render_entities, RenderedPrompt, ENTITY_SEPARATOR, NO_ENTITIES};
use crate::selector::{mix_seed, EmbeddingProvider};

pub const API_KEY_ENV: &str = "FSPONER_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    #[default]
    MockGold,
    MockNoise,
    Scripted,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "http" => Ok(BackendKind::Http),
            "mock_gold" | "mock" => Ok(BackendKind::MockGold),
            "mock_noise" | "noise" => Ok(BackendKind::MockNoise),
            "scripted" => Ok(BackendKind::Scripted),
            other => Err(Error::Config(format!("unknown backend {other:?}"))),
        }
    }
}

/// Completion-format deviations applied by the noise model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    /// `1. entity :: TYPE`
    SerialNumbers,
    /// `TYPE :: entity`
    TypeFirst,
    /// `- entity :: TYPE`
    MarkdownBullets,
    /// `**entity** :: TYPE`
    Bold,
}

impl Mutation {
    pub const ALL: [Mutation; 4] = [
        Mutation::SerialNumbers,
        Mutation::TypeFirst,
        Mutation::MarkdownBullets,
        Mutation::Bold,
    ];
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(default)]
    pub drop_rate: f64,
    #[serde(default)]
    pub retype_rate: f64,
    #[serde(default)]
    pub mutations: BTreeSet<Mutation>,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, rate) in [("drop_rate", self.drop_rate), ("retype_rate", self.retype_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {rate}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub backend: BackendKind,
    /// Base URL; `/chat/completions` is appended.
    pub endpoint: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub timeout_secs: u64,
    pub max_retries: u32,
    /// First retry delay; doubles on every further retry.
    pub backoff_ms: u64,
    /// Maximum in-flight backend requests.
    pub concurrency: usize,
    pub noise: Option<NoiseSpec>,
    pub noise_seed: u64,
    /// Prompt hash to completion, for the scripted backend.
    pub script: BTreeMap<String, String>,
    pub script_path: Option<PathBuf>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            backend: BackendKind::MockGold,
            endpoint: None,
            model: String::new(),
            temperature: 0.0,
            max_output_tokens: 512,
            timeout_secs: 120,
            max_retries: 4,
            backoff_ms: 500,
            concurrency: 4,
            noise: None,
            noise_seed: 0,
            script: BTreeMap::new(),
            script_path: None,
        }
    }
}

impl LlmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature < 0.0 || !self.temperature.is_finite() {
            return Err(Error::Config("temperature must be >= 0".into()));
        }
        if self.concurrency == 0 {
            return Err(Error::Config("concurrency must be at least 1".into()));
        }
        match self.backend {
            BackendKind::Http => {
                if self.endpoint.as_deref().is_none_or(str::is_empty) || self.model.is_empty() {
                    return Err(Error::Config("http backend requires endpoint and model".into()));
                }
            }
            BackendKind::MockNoise => {
                self.noise
                    .as_ref()
                    .ok_or_else(|| Error::Config("mock_noise backend requires a noise spec".into()))?
                    .validate()?;
            }
            BackendKind::MockGold | BackendKind::Scripted => {}
        }
        Ok(())
    }

    /// Model identity folded into the prompt hash. Mock backends get a synthetic
    /// name so their cache entries never collide with real models or each other.
    pub fn cache_identity(&self) -> String {
        match self.backend {
            BackendKind::Http => self.model.clone(),
            BackendKind::MockGold => "mock_gold".into(),
            BackendKind::MockNoise => format!(
                "mock_noise:{}:{}",
                serde_json::to_string(&self.noise).unwrap_or_default(),
                self.noise_seed
            ),
            BackendKind::Scripted if self.model.is_empty() => "scripted".into(),
            BackendKind::Scripted => self.model.clone(),
        }
    }

    pub fn display_model(&self) -> String {
        match self.backend {
            BackendKind::Http | BackendKind::Scripted if !self.model.is_empty() => self.model.clone(),
            BackendKind::MockNoise => "mock_noise".into(),
            _ => self.cache_identity(),
        }
    }
}

/// Content hash of (prompt text, model, temperature).
pub fn prompt_hash(prompt: &str, model: &str, temperature: f64) -> String {
    sha256_hex(&[prompt.as_bytes(), model.as_bytes(), &temperature.to_bits().to_le_bytes()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub prompt_hash: String,
    pub completion: String,
    pub latency_ms: u64,
    pub backend: String,
    pub model: String,
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
    /// Exact request body sent over the wire, for http backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request: Option<Value>,
}

/// Canonical completion for a gold sentence: one `entity :: TYPE` line per span.
pub fn mock_gold(gold: &TaggedSentence) -> String {
    render_entities(gold)
}

fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Gold completion degraded by the noise model. Each span draws two uniforms
/// (drop, retype) and, when retyped, a third for the replacement label; the
/// surviving lines then get the requested format mutations.
pub fn scripted_noise(
    gold: &TaggedSentence,
    labels: &BTreeSet<EntityType>,
    spec: &NoiseSpec,
    seed: u64,
) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept: Vec<(String, EntityType)> = Vec::new();
    for span in &gold.spans {
        let drop = unit_f64(&mut rng) < spec.drop_rate;
        let retype = unit_f64(&mut rng) < spec.retype_rate;
        if drop {
            continue;
        }
        let mut etype = span.etype.clone();
        if retype {
            let others: Vec<&EntityType> = labels.iter().filter(|l| **l != span.etype).collect();
            if !others.is_empty() {
                etype = others[(rng.next_u64() % others.len() as u64) as usize].clone();
            }
        }
        kept.push((gold.span_text(span), etype));
    }
    if kept.is_empty() {
        return NO_ENTITIES.to_string();
    }
    let m = &spec.mutations;
    kept.iter()
        .enumerate()
        .map(|(i, (surface, etype))| {
            let surface = if m.contains(&Mutation::Bold) {
                format!("**{surface}**")
            } else {
                surface.clone()
            };
            let mut line = if m.contains(&Mutation::TypeFirst) {
                format!("{etype}{ENTITY_SEPARATOR}{surface}")
            } else {
                format!("{surface}{ENTITY_SEPARATOR}{etype}")
            };
            if m.contains(&Mutation::SerialNumbers) {
                line = format!("{}. {line}", i + 1);
            }
            if m.contains(&Mutation::MarkdownBullets) {
                line = format!("- {line}");
            }
            line
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Append-only directory of completion records, `<dir>/<hash[..2]>/<hash>.json`.
/// Without a directory the cache lives in memory only.
#[derive(Debug, Default)]
pub struct CompletionCache {
    dir: Option<PathBuf>,
    memory: RwLock<HashMap<String, CompletionRecord>>,
}

impl CompletionCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        CompletionCache {
            dir,
            memory: RwLock::default(),
        }
    }

    pub fn path_for(dir: &Path, hash: &str) -> PathBuf {
        dir.join(&hash[..2.min(hash.len())]).join(format!("{hash}.json"))
    }

    pub fn lookup(&self, hash: &str) -> Option<CompletionRecord> {
        if let Some(r) = self.memory.read().expect("cache lock poisoned").get(hash) {
            return Some(r.clone());
        }
        let dir = self.dir.as_ref()?;
        let bytes = std::fs::read(Self::path_for(dir, hash)).ok()?;
        let record: CompletionRecord = serde_json::from_slice(&bytes).ok()?;
        self.memory
            .write()
            .expect("cache lock poisoned")
            .insert(hash.to_string(), record.clone());
        Some(record)
    }

    pub fn store(&self, record: &CompletionRecord) -> Result<()> {
        if let Some(dir) = &self.dir {
            let path = Self::path_for(dir, &record.prompt_hash);
            write_atomic(&path, &serde_json::to_vec_pretty(record)?)?;
        }
        self.memory
            .write()
            .expect("cache lock poisoned")
            .insert(record.prompt_hash.clone(), record.clone());
        Ok(())
    }
}

/// Shared HTTP plumbing: JSON POST with bearer auth and exponential backoff on
/// 429 / 5xx / transport errors.
#[derive(Debug, Clone)]
pub struct RetryingPoster {
    client: reqwest::Client,
    max_retries: u32,
    backoff: Duration,
    api_key: Option<String>,
}

impl RetryingPoster {
    pub fn new(timeout: Duration, max_retries: u32, backoff: Duration) -> Result<Self> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(RetryingPoster {
            client,
            max_retries,
            backoff,
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        })
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub async fn post(&self, url: &str, body: &Value) -> Result<Value> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            let mut req = self.client.post(url).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let err = match req.send().await {
                Ok(resp) if resp.status().is_success() => {
                    return resp
                        .json::<Value>()
                        .await
                        .map_err(|e| Error::BadResponse(e.to_string()));
                }
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().await.unwrap_or_default();
                    let body: String = text.chars().take(300).collect();
                    let err = Error::Http {
                        status: status.as_u16(),
                        attempts,
                        body,
                    };
                    if !(status.as_u16() == 429 || status.is_server_error()) {
                        return Err(err);
                    }
                    err
                }
                Err(e) if e.is_timeout() => Error::Timeout { attempts },
                Err(e) => Error::Transport {
                    attempts,
                    message: e.to_string(),
                },
            };
            if attempts > self.max_retries {
                return Err(err);
            }
            let delay = self.backoff * 2u32.saturating_pow(attempts - 1);
            tracing::warn!(%url, attempts, ?delay, error = %err, "retrying request");
            tokio::time::sleep(delay).await;
        }
    }
}

fn join_url(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path)
}

/// Request body for an OpenAI-compatible chat completion with a single user message.
pub fn chat_request_body(model: &str, prompt: &str, temperature: f64, max_tokens: u32) -> Value {
    json!({
        "model": model,
        "messages": [{ "role": "user", "content": prompt }],
        "temperature": temperature,
        "max_tokens": max_tokens,
    })
}

enum Backend {
    Http { poster: RetryingPoster, url: String },
    MockGold,
    MockNoise { spec: NoiseSpec, seed: u64 },
    Scripted(BTreeMap<String, String>),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallStats {
    pub backend_calls: usize,
    pub cache_hits: usize,
}

pub struct LlmClient {
    cfg: LlmConfig,
    model_id: String,
    backend: Backend,
    cache: CompletionCache,
    permits: Semaphore,
    backend_calls: AtomicUsize,
    cache_hits: AtomicUsize,
}

impl LlmClient {
    pub fn new(cfg: LlmConfig, cache_dir: Option<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let backend = match cfg.backend {
            BackendKind::Http => Backend::Http {
                poster: RetryingPoster::new(
                    Duration::from_secs(cfg.timeout_secs),
                    cfg.max_retries,
                    Duration::from_millis(cfg.backoff_ms),
                )?,
                url: join_url(cfg.endpoint.as_deref().unwrap_or_default(), "chat/completions"),
            },
            BackendKind::MockGold => Backend::MockGold,
            BackendKind::MockNoise => Backend::MockNoise {
                spec: cfg.noise.clone().unwrap_or_default(),
                seed: cfg.noise_seed,
            },
            BackendKind::Scripted => {
                let mut script = cfg.script.clone();
                if let Some(path) = &cfg.script_path {
                    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                    let loaded: BTreeMap<String, String> = serde_json::from_str(&text)?;
                    script.extend(loaded);
                }
                Backend::Scripted(script)
            }
        };
        Ok(LlmClient {
            model_id: cfg.cache_identity(),
            permits: Semaphore::new(cfg.concurrency),
            cfg,
            backend,
            cache: CompletionCache::new(cache_dir),
            backend_calls: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &LlmConfig {
        &self.cfg
    }

    pub fn hash_for(&self, prompt: &RenderedPrompt) -> String {
        prompt_hash(&prompt.text, &self.model_id, self.cfg.temperature)
    }

    pub fn stats(&self) -> CallStats {
        CallStats {
            backend_calls: self.backend_calls.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
        }
    }

    /// Completes `prompt`, consulting the cache first. `gold` is only read by the
    /// mock backends; `labels` is the label set the noise model may retype into.
    pub async fn complete(
        &self,
        prompt: &RenderedPrompt,
        gold: Option<&TaggedSentence>,
        labels: &BTreeSet<EntityType>,
    ) -> Result<CompletionRecord> {
        if prompt.text.is_empty() {
            return Err(Error::Config("empty prompt".into()));
        }
        let hash = self.hash_for(prompt);
        if let Some(record) = self.cache.lookup(&hash) {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(record);
        }

        let _permit = self.permits.acquire().await.expect("semaphore never closed");
        self.backend_calls.fetch_add(1, Ordering::SeqCst);
        let started = Instant::now();
        let (completion, request, backend) = match &self.backend {
            Backend::Http { poster, url } => {
                let body = chat_request_body(
                    &self.cfg.model,
                    &prompt.text,
                    self.cfg.temperature,
                    self.cfg.max_output_tokens,
                );
                tracing::debug!(%url, payload = %body, "chat completion request");
                let resp = poster.post(url, &body).await?;
                let text = resp
                    .pointer("/choices/0/message/content")
                    .and_then(Value::as_str)
                    .ok_or_else(|| Error::BadResponse("missing choices[0].message.content".into()))?
                    .to_string();
                (text, Some(body), "http")
            }
            Backend::MockGold => (mock_gold(gold.ok_or(Error::MissingGold)?), None, "mock_gold"),
            Backend::MockNoise { spec, seed } => {
                let gold = gold.ok_or(Error::MissingGold)?;
                let text = scripted_noise(gold, labels, spec, mix_seed(*seed, gold.id));
                (text, None, "mock_noise")
            }
            Backend::Scripted(script) => {
                let text = script
                    .get(&hash)
                    .cloned()
                    .ok_or_else(|| Error::ScriptMiss(hash.clone()))?;
                (text, None, "scripted")
            }
        };
        let record = CompletionRecord {
            prompt_hash: hash,
            completion,
            latency_ms: started.elapsed().as_millis() as u64,
            backend: backend.to_string(),
            model: self.model_id.clone(),
            timestamp_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
            request,
        };
        self.cache.store(&record)?;
        Ok(record)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
}

fn default_timeout() -> u64 {
    60
}

fn default_retries() -> u32 {
    4
}

fn default_backoff() -> u64 {
    500
}

/// OpenAI-compatible `/embeddings` provider.
pub struct HttpEmbeddingProvider {
    poster: RetryingPoster,
    url: String,
    model: String,
}

impl HttpEmbeddingProvider {
    pub fn new(cfg: &EmbeddingConfig) -> Result<Self> {
        Ok(HttpEmbeddingProvider {
            poster: RetryingPoster::new(
                Duration::from_secs(cfg.timeout_secs),
                cfg.max_retries,
                Duration::from_millis(cfg.backoff_ms),
            )?,
            url: join_url(&cfg.endpoint, "embeddings"),
            model: cfg.model.clone(),
        })
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn id(&self) -> String {
        format!("{}@{}", self.model, self.url)
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let body = json!({ "model": self.model, "input": texts });
        let resp = self.poster.post(&self.url, &body).await?;
        let data = resp
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::BadResponse("missing data array".into()))?;
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let index = item.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
            let vector = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::BadResponse("missing embedding".into()))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| Error::BadResponse("non-numeric embedding".into())))
                .collect::<Result<Vec<f64>>>()?;
            rows.push((index, vector));
        }
        rows.sort_by_key(|(i, _)| *i);
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }
}
