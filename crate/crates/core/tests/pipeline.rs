//! End-to-end runs with the offline backends.

mod common;

use std::collections::BTreeMap;
use std::path::Path;

use fsponer_core::corpus::Corpus;
use fsponer_core::experiment::{expand_sweep, run_experiment, ExperimentConfig, PoolSize};
use fsponer_core::llm::{BackendKind, LlmClient, LlmConfig};
use fsponer_core::prompt::PromptTemplate;
use fsponer_core::report::{report, ReportFormat};
use fsponer_core::selector::Strategy;
use serde_json::Value;

fn write(path: &Path, corpus: &Corpus) {
    std::fs::write(path, corpus.to_conll()).unwrap();
}

fn config(dir: &Path) -> ExperimentConfig {
    let train = dir.join("train.conll");
    let test = dir.join("test.conll");
    write(&train, &common::synthetic_corpus(60, 1));
    write(&test, &common::synthetic_corpus(12, 2));
    ExperimentConfig {
        train_path: Some(train),
        test_path: test,
        k_values: vec![1, 5],
        pool_size: PoolSize::Fixed(40),
        output_dir: dir.join("runs"),
        ..Default::default()
    }
}

fn read_jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[tokio::test]
async fn prompts_record_the_selected_examples() {
    let dir = tempfile::tempdir().unwrap();
    for strategy in [Strategy::Random, Strategy::Tfidf, Strategy::Combined] {
        let cfg = ExperimentConfig {
            strategy,
            ..config(dir.path())
        };
        run_experiment(&cfg).await.unwrap();
        for k in &cfg.k_values {
            let k_dir = cfg.run_dir().join(format!("k{k}"));
            let selections = read_jsonl(&k_dir.join("selections.jsonl"));
            let prompts = read_jsonl(&k_dir.join("prompts.jsonl"));
            assert_eq!(selections.len(), 12);
            for (s, p) in selections.iter().zip(&prompts) {
                assert_eq!(s["input_index"], p["input_index"]);
                assert_eq!(s["selection"]["chosen"], p["example_ids"], "{strategy} k={k}");
                assert_eq!(s["selection"]["chosen"].as_array().unwrap().len(), *k);
            }
        }
    }
}

#[tokio::test]
async fn test_limit_takes_a_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        test_limit: Some(4),
        k_values: vec![1],
        ..config(dir.path())
    };
    let result = run_experiment(&cfg).await.unwrap();
    assert_eq!(result.points[0].report.n_sentences, 4);
    let prompts = read_jsonl(&cfg.run_dir().join("k1/prompts.jsonl"));
    let indices: Vec<u64> = prompts.iter().map(|p| p["input_index"].as_u64().unwrap()).collect();
    assert_eq!(indices, [0, 1, 2, 3]);
}

#[tokio::test]
async fn pool_size_sweep_gives_one_row_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let base = config(dir.path());
    let runs = expand_sweep(
        &base,
        &[Strategy::Random, Strategy::Tfidf],
        &[PoolSize::Fixed(10), PoolSize::Fixed(30), PoolSize::Full],
    );
    let mut results = Vec::new();
    for cfg in &runs {
        results.push(run_experiment(cfg).await.unwrap());
    }
    let pool_lens: Vec<usize> = results.iter().map(|r| r.pool_len).collect();
    assert_eq!(pool_lens, [10, 10, 30, 30, 60, 60]);
    let csv = report(&results, ReportFormat::Csv);
    assert_eq!(csv.lines().count(), 1 + 6 * 2);
    assert!(results.iter().all(|r| r.is_complete()));
}

#[tokio::test]
async fn scripted_backend_replays_by_prompt_hash() {
    let dir = tempfile::tempdir().unwrap();
    let base = ExperimentConfig {
        k_values: vec![1],
        test_limit: Some(3),
        ..config(dir.path())
    };
    // Record with mock_gold, then replay the same completions through the scripted backend.
    let recorded = run_experiment(&base).await.unwrap();
    let prompts = read_jsonl(&base.run_dir().join("k1/prompts.jsonl"));
    let completions = read_jsonl(&base.run_dir().join("k1/completions.jsonl"));

    let scripted = LlmConfig {
        backend: BackendKind::Scripted,
        model: "replay".into(),
        ..Default::default()
    };
    let hasher = LlmClient::new(scripted.clone(), None).unwrap();
    let mut script = BTreeMap::new();
    for (p, c) in prompts.iter().zip(&completions) {
        let prompt = fsponer_core::RenderedPrompt {
            text: p["text"].as_str().unwrap().into(),
            example_ids: vec![],
            token_estimate: 0,
        };
        script.insert(hasher.hash_for(&prompt), c["completion"].as_str().unwrap().to_string());
    }
    let cfg = ExperimentConfig {
        llm: LlmConfig { script, ..scripted },
        output_dir: dir.path().join("replay"),
        ..base.clone()
    };
    let replayed = run_experiment(&cfg).await.unwrap();
    assert!(replayed.is_complete());
    assert_eq!(replayed.points[0].report, recorded.points[0].report);

    let missing = ExperimentConfig {
        llm: LlmConfig {
            backend: BackendKind::Scripted,
            model: "other".into(),
            ..Default::default()
        },
        output_dir: dir.path().join("missing"),
        ..base
    };
    let result = run_experiment(&missing).await.unwrap();
    assert!(!result.points[0].complete);
    assert!(result.points[0].error.as_deref().unwrap().contains("has no completion for prompt"));
}

#[tokio::test]
async fn builtin_templates_reconcile_with_matching_corpora() {
    let pool = common::synthetic_pool(30, 3);
    let tmpl = PromptTemplate::builtin("assembly").unwrap().reconcile(&pool.label_set()).unwrap();
    assert_eq!(tmpl.label_set(), pool.label_set());
    assert!(PromptTemplate::builtin("fabner").unwrap().reconcile(&pool.label_set()).is_err());
}

#[tokio::test]
async fn invalid_configs_are_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        test_path: dir.path().join("absent.conll"),
        ..config(dir.path())
    };
    let err = run_experiment(&cfg).await.unwrap_err();
    assert!(err.to_string().contains("absent.conll"), "{err}");
}
