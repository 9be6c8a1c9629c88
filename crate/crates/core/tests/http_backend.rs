//! The http backend against a local fake of an OpenAI-compatible server.

mod common;

use std::collections::{BTreeSet, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use fsponer_core::error::Error;
use fsponer_core::experiment::{run_experiment, ExperimentConfig, PoolSize};
use fsponer_core::llm::{BackendKind, EmbeddingConfig, HttpEmbeddingProvider, LlmClient, LlmConfig, API_KEY_ENV};
use fsponer_core::prompt::RenderedPrompt;
use fsponer_core::selector::{select_embedding, EmbeddingCache, EmbeddingProvider, SelectionConfig, Strategy};
use serde_json::{json, Value};

const KEY: &str = "test-key-123";

#[derive(Default)]
struct FakeState {
    /// Responses served in order; once empty every request gets a canned completion.
    script: VecDeque<(StatusCode, Value)>,
    delay: Option<Duration>,
    requests: Vec<(Option<String>, Value)>,
}

type Shared = Arc<Mutex<FakeState>>;

async fn respond(State(state): State<Shared>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let (reply, delay) = {
        let mut s = state.lock().unwrap();
        let auth = headers
            .get("authorization")
            .and_then(|v| v.to_str().ok())
            .map(String::from);
        s.requests.push((auth, body.clone()));
        let reply = s.script.pop_front();
        (reply, s.delay)
    };
    if let Some(d) = delay {
        tokio::time::sleep(d).await;
    }
    reply.map(|(c, v)| (c, Json(v))).unwrap_or_else(|| {
        if body.get("input").is_some() {
            let n = body["input"].as_array().map_or(0, Vec::len);
            // Returned in reverse order to exercise index handling.
            let data: Vec<Value> = (0..n)
                .rev()
                .map(|i| json!({ "index": i, "embedding": [1.0, i as f64] }))
                .collect();
            (StatusCode::OK, Json(json!({ "data": data })))
        } else {
            (StatusCode::OK, Json(completion("hex bolt :: PART")))
        }
    })
}

fn completion(text: &str) -> Value {
    json!({ "choices": [{ "index": 0, "message": { "role": "assistant", "content": text } }] })
}

async fn fake_server(state: FakeState) -> (String, Shared) {
    std::env::set_var(API_KEY_ENV, KEY);
    let shared: Shared = Arc::new(Mutex::new(state));
    let app = Router::new()
        .route("/v1/chat/completions", post(respond))
        .route("/v1/embeddings", post(respond))
        .with_state(shared.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}/v1"), shared)
}

fn http_config(endpoint: &str) -> LlmConfig {
    LlmConfig {
        backend: BackendKind::Http,
        endpoint: Some(endpoint.to_string()),
        model: "gpt-test".into(),
        max_retries: 3,
        backoff_ms: 5,
        timeout_secs: 5,
        ..Default::default()
    }
}

fn prompt(text: &str) -> RenderedPrompt {
    RenderedPrompt {
        text: text.into(),
        example_ids: vec![],
        token_estimate: 1,
    }
}

#[tokio::test]
async fn sends_exact_payload_with_bearer_auth() {
    let (url, state) = fake_server(FakeState::default()).await;
    let client = LlmClient::new(http_config(&url), None).unwrap();
    let record = client.complete(&prompt("Sentence: x"), None, &BTreeSet::new()).await.unwrap();
    assert_eq!(record.completion, "hex bolt :: PART");
    assert_eq!(record.backend, "http");

    let requests = state.lock().unwrap().requests.clone();
    assert_eq!(requests.len(), 1);
    assert_eq!(requests[0].0.as_deref(), Some("Bearer test-key-123"));
    assert_eq!(
        requests[0].1,
        json!({
            "model": "gpt-test",
            "messages": [{ "role": "user", "content": "Sentence: x" }],
            "temperature": 0.0,
            "max_tokens": 512,
        })
    );
    assert_eq!(record.request.as_ref(), Some(&requests[0].1));
}

#[tokio::test]
async fn cache_hit_skips_the_backend() {
    let (url, state) = fake_server(FakeState::default()).await;
    let dir = tempfile::tempdir().unwrap();
    let client = LlmClient::new(http_config(&url), Some(dir.path().to_path_buf())).unwrap();
    let first = client.complete(&prompt("p"), None, &BTreeSet::new()).await.unwrap();

    let fresh = LlmClient::new(http_config(&url), Some(dir.path().to_path_buf())).unwrap();
    let second = fresh.complete(&prompt("p"), None, &BTreeSet::new()).await.unwrap();
    assert_eq!(first, second);
    assert_eq!(state.lock().unwrap().requests.len(), 1);
    assert_eq!(fresh.stats().cache_hits, 1);
    assert_eq!(fresh.stats().backend_calls, 0);
}

#[tokio::test]
async fn retries_rate_limits_and_server_errors() {
    let script = VecDeque::from([
        (StatusCode::TOO_MANY_REQUESTS, json!({ "error": "slow down" })),
        (StatusCode::SERVICE_UNAVAILABLE, json!({ "error": "busy" })),
    ]);
    let (url, state) = fake_server(FakeState { script, ..Default::default() }).await;
    let client = LlmClient::new(http_config(&url), None).unwrap();
    let record = client.complete(&prompt("p"), None, &BTreeSet::new()).await.unwrap();
    assert_eq!(record.completion, "hex bolt :: PART");
    assert_eq!(state.lock().unwrap().requests.len(), 3);
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let script = VecDeque::from([(StatusCode::BAD_REQUEST, json!({ "error": "bad model" }))]);
    let (url, state) = fake_server(FakeState { script, ..Default::default() }).await;
    let client = LlmClient::new(http_config(&url), None).unwrap();
    let err = client.complete(&prompt("p"), None, &BTreeSet::new()).await.unwrap_err();
    assert!(matches!(err, Error::Http { status: 400, attempts: 1, .. }), "{err}");
    assert!(err.to_string().contains("bad model"));
    assert_eq!(state.lock().unwrap().requests.len(), 1);
}

#[tokio::test]
async fn gives_up_after_max_retries() {
    let script = (0..10).map(|_| (StatusCode::INTERNAL_SERVER_ERROR, json!({}))).collect();
    let (url, state) = fake_server(FakeState { script, ..Default::default() }).await;
    let cfg = LlmConfig {
        max_retries: 2,
        ..http_config(&url)
    };
    let err = LlmClient::new(cfg, None)
        .unwrap()
        .complete(&prompt("p"), None, &BTreeSet::new())
        .await
        .unwrap_err();
    assert!(matches!(err, Error::Http { status: 500, attempts: 3, .. }), "{err}");
    assert_eq!(state.lock().unwrap().requests.len(), 3);
}

#[tokio::test]
async fn slow_backend_times_out() {
    let (url, _state) = fake_server(FakeState {
        delay: Some(Duration::from_secs(3)),
        ..Default::default()
    })
    .await;
    let cfg = LlmConfig {
        timeout_secs: 1,
        max_retries: 0,
        ..http_config(&url)
    };
    let err = LlmClient::new(cfg, None)
        .unwrap()
        .complete(&prompt("p"), None, &BTreeSet::new())
        .await
        .unwrap_err();
    assert!(matches!(err, Error::Timeout { attempts: 1 }), "{err}");
}

#[tokio::test]
async fn missing_content_is_a_bad_response() {
    let script = VecDeque::from([(StatusCode::OK, json!({ "choices": [] }))]);
    let (url, _state) = fake_server(FakeState { script, ..Default::default() }).await;
    let err = LlmClient::new(http_config(&url), None)
        .unwrap()
        .complete(&prompt("p"), None, &BTreeSet::new())
        .await
        .unwrap_err();
    assert!(matches!(err, Error::BadResponse(_)), "{err}");
}

#[tokio::test]
async fn embeddings_are_reordered_by_index() {
    let (url, state) = fake_server(FakeState::default()).await;
    let provider = HttpEmbeddingProvider::new(&EmbeddingConfig {
        endpoint: url,
        model: "embed-test".into(),
        timeout_secs: 5,
        max_retries: 0,
        backoff_ms: 1,
    })
    .unwrap();
    let vectors = provider.embed(&["a".into(), "b".into(), "c".into()]).await.unwrap();
    assert_eq!(vectors, vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 2.0]]);
    let requests = state.lock().unwrap().requests.clone();
    assert_eq!(requests[0].1, json!({ "model": "embed-test", "input": ["a", "b", "c"] }));

    let pool = common::synthetic_pool(6, 1);
    let cache = EmbeddingCache::new();
    let cfg = SelectionConfig {
        strategy: Strategy::Embedding,
        k: 2,
        seed: 0,
        input_index: 0,
    };
    let input = &common::synthetic_sentences(1, 2)[0];
    let sel = select_embedding(&pool, &provider, &cache, input, &cfg).await.unwrap();
    assert_eq!(sel.chosen.len(), 2);
    let calls = state.lock().unwrap().requests.len();
    select_embedding(&pool, &provider, &cache, input, &cfg).await.unwrap();
    assert_eq!(state.lock().unwrap().requests.len(), calls, "second selection should hit the cache");
}

#[tokio::test]
async fn backend_failure_marks_point_incomplete_and_keeps_partial_results() {
    // Two good completions, then a hard client error.
    let script = VecDeque::from([
        (StatusCode::OK, completion("NONE")),
        (StatusCode::OK, completion("NONE")),
        (StatusCode::UNAUTHORIZED, json!({ "error": "invalid key" })),
    ]);
    let (url, _state) = fake_server(FakeState { script, ..Default::default() }).await;
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.conll");
    let test = dir.path().join("test.conll");
    std::fs::write(&train, common::synthetic_corpus(20, 1).to_conll()).unwrap();
    std::fs::write(&test, common::synthetic_corpus(6, 2).to_conll()).unwrap();
    let cfg = ExperimentConfig {
        train_path: Some(train),
        test_path: test,
        k_values: vec![1],
        pool_size: PoolSize::Full,
        llm: LlmConfig {
            concurrency: 1,
            ..http_config(&url)
        },
        output_dir: dir.path().join("runs"),
        ..Default::default()
    };
    let result = run_experiment(&cfg).await.unwrap();
    let point = &result.points[0];
    assert!(!point.complete);
    assert!(!result.is_complete());
    assert!(point.error.as_deref().unwrap().contains("401"));
    assert_eq!(point.n_evaluated, 2);
    let k_dir = cfg.run_dir().join("k1");
    let saved: Value = serde_json::from_slice(&std::fs::read(k_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(saved["complete"], json!(false));
    let completions = std::fs::read_to_string(k_dir.join("completions.jsonl")).unwrap();
    assert_eq!(completions.lines().count(), 2);
}
