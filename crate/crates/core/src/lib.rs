//! Few-shot prompt optimization for named entity recognition with LLMs.
//!
//! The pipeline builds a stratified few-shot pool from an annotated corpus,
//! selects demonstrations per input sentence (random, TF-IDF kNN, or an
//! interleave of both), renders a four-block prompt, queries a chat-completion
//! backend, parses the completion back into spans, and scores span-level
//! weighted F1.
//!
//! ```no_run
//! # async fn demo() -> fsponer_core::Result<()> {
//! use fsponer_core::experiment::{run_experiment, ExperimentConfig};
//!
//! let cfg = ExperimentConfig::load("experiment.json".as_ref())?;
//! let result = run_experiment(&cfg).await?;
//! for point in &result.points {
//!     println!("k={} weighted F1={:.4}", point.k, point.report.weighted_f1);
//! }
//! # Ok(()) }
//! ```

pub mod api;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
mod fsutil;
pub mod llm;
pub mod parse;
pub mod prompt;
pub mod report;
pub mod selector;
pub mod stratify;
pub mod tfidf;

pub use corpus::{Corpus, EntitySpan, EntityType, TaggedSentence};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use experiment::{ExperimentConfig, RunResult};
pub use prompt::{PromptTemplate, RenderedPrompt};
pub use selector::{SelectionConfig, SelectionResult, Strategy};
pub use stratify::StratifiedDataset;
pub use tfidf::TfIdfModel;
