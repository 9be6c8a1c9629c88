use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fsponer_client::{FsponerClient, DEFAULT_SERVER};
use fsponer_core::api::{
    EvalRequest, JobState, ParseCorpusRequest, PromptRequest, ReportRequest, SelectRequest, StratifyRequest,
};
use fsponer_core::corpus::{CorpusFormat, SchemeChoice, TaggedSentence};
use fsponer_core::eval::MatchMode;
use fsponer_core::experiment::{expand_sweep, ExperimentConfig, PoolSize, RunResult};
use fsponer_core::llm::BackendKind;
use fsponer_core::parse::ParseReport;
use fsponer_core::prompt::PromptTemplate;
use fsponer_core::report::ReportFormat;
use fsponer_core::selector::Strategy;
use fsponer_core::stratify::StratifiedDataset;

type BoxError = Box<dyn std::error::Error + Send + Sync>;

/// Few-shot NER prompting experiments, driven through an fsponer server.
#[derive(Debug, Parser)]
#[command(name = "fsponer", version)]
struct Cli {
    /// Base URL of the fsponer server.
    #[arg(long, global = true, env = "FSPONER_SERVER", default_value = DEFAULT_SERVER)]
    server: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a stratified few-shot pool from an annotated corpus.
    Stratify(StratifyArgs),
    /// Select demonstrations for one input sentence.
    Select(SelectArgs),
    /// Render the prompt for one input sentence.
    Prompt(PromptArgs),
    /// Run an experiment (or a strategy / pool-size sweep) and print its report.
    Run(Box<RunArgs>),
    /// Score parsed predictions against a gold corpus.
    Eval(EvalArgs),
    /// Tabulate finished runs from their output directories.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct CorpusArgs {
    /// Corpus format; detected from the file extension when omitted.
    #[arg(long)]
    format: Option<CorpusFormat>,
    #[arg(long, default_value = "auto")]
    scheme: SchemeChoice,
}

#[derive(Debug, Args)]
struct StratifyArgs {
    /// Annotated corpus (CoNLL or JSONL).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 300)]
    size: usize,
    /// Pool JSONL destination; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    corpus: CorpusArgs,
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Few-shot pool JSONL written by `stratify`.
    #[arg(long)]
    pool: PathBuf,
    /// Input sentence as whitespace-separated tokens.
    #[arg(long, conflicts_with_all = ["input", "index"])]
    sentence: Option<String>,
    /// Corpus holding the input sentence.
    #[arg(long, requires = "index")]
    input: Option<PathBuf>,
    /// Position of the input sentence in `--input`.
    #[arg(long)]
    index: Option<usize>,
    #[arg(long, default_value = "tfidf")]
    strategy: Strategy,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    corpus: CorpusArgs,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[command(flatten)]
    input: InputArgs,
}

#[derive(Debug, Args)]
struct PromptArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Built-in template name.
    #[arg(long, conflicts_with = "template_file")]
    template: Option<String>,
    /// Template JSON file.
    #[arg(long)]
    template_file: Option<PathBuf>,
    /// Domain for the generic template.
    #[arg(long)]
    domain: Option<String>,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    few_shot: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    format: Option<CorpusFormat>,
    #[arg(long)]
    scheme: Option<SchemeChoice>,
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Run every listed strategy.
    #[arg(long, value_delimiter = ',')]
    strategies: Vec<Strategy>,
    /// k values, e.g. `1,5,10,20,40,80`.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    #[arg(long)]
    pool_size: Option<PoolSize>,
    /// Run every listed pool size, e.g. `100,200,300,full`.
    #[arg(long, value_delimiter = ',')]
    pool_sizes: Vec<PoolSize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    backend: Option<BackendKind>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    template: Option<String>,
    #[arg(long)]
    template_file: Option<PathBuf>,
    #[arg(long)]
    domain: Option<String>,
    #[arg(long)]
    test_limit: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Report format printed after the runs finish.
    #[arg(long, default_value = "md")]
    report: ReportFormat,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Parsed predictions, one per line (a run's `parsed.jsonl` or bare parse reports).
    #[arg(long)]
    parsed: PathBuf,
    /// Gold corpus aligned line-for-line with the predictions; sentences past the
    /// last prediction are ignored, so a partial run scores its prefix.
    #[arg(long)]
    gold: PathBuf,
    #[arg(long, value_enum, default_value = "exact")]
    r#match: MatchArg,
    #[command(flatten)]
    corpus: CorpusArgs,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum MatchArg {
    Exact,
    Overlap,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Run directories, or output directories containing run directories.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: ReportFormat,
}

fn read(path: &Path) -> Result<String, BoxError> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn absolute(path: PathBuf) -> PathBuf {
    std::path::absolute(&path).unwrap_or(path)
}

async fn load_corpus(
    client: &FsponerClient,
    path: &Path,
    args: &CorpusArgs,
) -> Result<fsponer_core::Corpus, BoxError> {
    let req = ParseCorpusRequest {
        text: read(path)?,
        format: args.format.unwrap_or_else(|| CorpusFormat::from_path(path)),
        scheme: args.scheme,
    };
    Ok(client.parse_corpus(&req).await?)
}

async fn resolve_input(
    client: &FsponerClient,
    args: &InputArgs,
) -> Result<(StratifiedDataset, TaggedSentence, usize), BoxError> {
    let pool = StratifiedDataset::from_jsonl(&read(&args.pool)?)?;
    let (input, index) = match (&args.sentence, &args.input, args.index) {
        (Some(text), _, _) => {
            let tokens = text.split_whitespace().map(String::from).collect();
            (TaggedSentence::new(0, tokens, vec![])?, 0)
        }
        (None, Some(path), Some(index)) => {
            let corpus = load_corpus(client, path, &args.corpus).await?;
            let s = corpus
                .sentences
                .get(index)
                .cloned()
                .ok_or_else(|| format!("{} has {} sentences", path.display(), corpus.len()))?;
            (s, index)
        }
        _ => return Err("give either --sentence or --input with --index".into()),
    };
    Ok((pool, input, index))
}

async fn selection(
    client: &FsponerClient,
    args: &InputArgs,
) -> Result<(StratifiedDataset, TaggedSentence, fsponer_core::SelectionResult), BoxError> {
    let (pool, input, index) = resolve_input(client, args).await?;
    let req = SelectRequest {
        pool,
        input,
        strategy: args.strategy,
        k: args.k,
        seed: args.seed,
        input_index: index,
        embedding: None,
    };
    let result = client.select(&req).await?;
    Ok((req.pool, req.input, result))
}

/// Config file (or defaults) with every given flag applied on top.
fn experiment_config(args: &RunArgs) -> Result<ExperimentConfig, BoxError> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    macro_rules! set {
        ($field:expr, $flag:expr) => {
            if let Some(v) = $flag.clone() {
                $field = v;
            }
        };
    }
    set!(cfg.name, args.name.clone().map(Some));
    set!(cfg.train_path, args.train.clone().map(Some));
    set!(cfg.few_shot_path, args.few_shot.clone().map(Some));
    set!(cfg.test_path, args.test);
    set!(cfg.format, args.format.map(Some));
    set!(cfg.scheme, args.scheme);
    set!(cfg.strategy, args.strategy);
    set!(cfg.pool_size, args.pool_size);
    set!(cfg.seed, args.seed);
    set!(cfg.llm.backend, args.backend);
    set!(cfg.llm.model, args.model);
    set!(cfg.llm.endpoint, args.endpoint.clone().map(Some));
    set!(cfg.llm.temperature, args.temperature);
    set!(cfg.llm.concurrency, args.concurrency);
    set!(cfg.template, args.template.clone().map(Some));
    set!(cfg.template_path, args.template_file.clone().map(Some));
    set!(cfg.domain, args.domain);
    set!(cfg.test_limit, args.test_limit.map(Some));
    set!(cfg.output_dir, args.output_dir);
    set!(cfg.cache_dir, args.cache_dir.clone().map(Some));
    if !args.k.is_empty() {
        cfg.k_values = args.k.clone();
    }
    // The server resolves paths against its own working directory.
    cfg.train_path = cfg.train_path.map(absolute);
    cfg.few_shot_path = cfg.few_shot_path.map(absolute);
    cfg.test_path = absolute(cfg.test_path);
    cfg.template_path = cfg.template_path.map(absolute);
    cfg.output_dir = absolute(cfg.output_dir);
    cfg.cache_dir = cfg.cache_dir.map(absolute);
    cfg.llm.script_path = cfg.llm.script_path.map(absolute);
    Ok(cfg)
}

/// `run.json` files under each given path (the path itself or its immediate children).
fn run_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>, BoxError> {
    let mut files = Vec::new();
    for path in paths {
        let direct = path.join("run.json");
        if direct.is_file() {
            files.push(direct);
            continue;
        }
        let mut nested: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| format!("{}: {e}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path().join("run.json")))
            .filter(|p| p.is_file())
            .collect();
        if nested.is_empty() {
            return Err(format!("no run.json under {}", path.display()).into());
        }
        nested.sort();
        files.extend(nested);
    }
    Ok(files)
}

async fn execute(cli: Cli) -> Result<ExitCode, BoxError> {
    let client = FsponerClient::new(&cli.server);
    match cli.command {
        Command::Stratify(args) => {
            let req = StratifyRequest {
                corpus: ParseCorpusRequest {
                    text: read(&args.input)?,
                    format: args.corpus.format.unwrap_or_else(|| CorpusFormat::from_path(&args.input)),
                    scheme: args.corpus.scheme,
                },
                target_size: Some(args.size),
            };
            let resp = client.stratify(&req).await?;
            let jsonl = resp.pool.to_jsonl();
            match &args.output {
                Some(path) => std::fs::write(path, jsonl).map_err(|e| format!("{}: {e}", path.display()))?,
                None => print!("{jsonl}"),
            }
            eprintln!("pool: {} examples ({} tag repairs)", resp.pool.len(), resp.repairs);
            for (etype, cov) in &resp.coverage {
                eprintln!("  {etype}: {} sentences, {} spans", cov.selected_sentences, cov.span_count);
            }
        }
        Command::Select(args) => {
            let (_, _, result) = selection(&client, &args.input).await?;
            println!("{}", serde_json::to_string_pretty(&result)?);
        }
        Command::Prompt(args) => {
            let (pool, input, result) = selection(&client, &args.input).await?;
            let template = args.template_file.as_deref().map(PromptTemplate::load).transpose()?;
            let req = PromptRequest {
                template,
                template_name: args.template,
                domain: args.domain,
                examples: result.examples(&pool).into_iter().cloned().collect(),
                example_ids: Some(result.chosen.clone()),
                input,
            };
            let prompt = client.prompt(&req).await?;
            println!("{}", prompt.text);
            eprintln!("~{} tokens, examples {:?}", prompt.token_estimate, prompt.example_ids);
        }
        Command::Run(args) => {
            let base = experiment_config(&args)?;
            let mut results: Vec<RunResult> = Vec::new();
            let mut ok = true;
            for cfg in expand_sweep(&base, &args.strategies, &args.pool_sizes) {
                let started = client.start_run(&cfg).await?;
                eprintln!("{}: {} started", started.id, cfg.run_label());
                let status = client.run_status(&started.id, true).await?;
                match (status.state, status.result) {
                    (JobState::Done, Some(result)) => {
                        for p in result.points.iter().filter(|p| !p.complete) {
                            ok = false;
                            eprintln!("  k={} incomplete: {}", p.k, p.error.as_deref().unwrap_or("unknown error"));
                        }
                        eprintln!(
                            "{}: {} backend calls, {} cache hits, {} ms",
                            status.id, result.backend_calls, result.cache_hits, result.wall_time_ms
                        );
                        results.push(result);
                    }
                    (_, _) => {
                        ok = false;
                        eprintln!("{}: failed: {}", status.id, status.error.unwrap_or_default());
                    }
                }
            }
            let table = client
                .report(&ReportRequest {
                    results,
                    run_ids: vec![],
                    format: args.report,
                })
                .await?;
            print!("{table}");
            return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
        Command::Eval(args) => {
            let mut predictions = Vec::new();
            for (n, line) in read(&args.parsed)?.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let value: serde_json::Value = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", n + 1))?;
                let report: ParseReport = serde_json::from_value(value.get("parse").cloned().unwrap_or(value))
                    .map_err(|e| format!("line {}: {e}", n + 1))?;
                predictions.push(report);
            }
            let gold = load_corpus(&client, &args.gold, &args.corpus).await?;
            let gold: Vec<TaggedSentence> = gold.sentences.into_iter().take(predictions.len()).collect();
            let match_mode = match args.r#match {
                MatchArg::Exact => MatchMode::Exact,
                MatchArg::Overlap => MatchMode::Overlap,
            };
            let report = client
                .eval(&EvalRequest {
                    predictions,
                    gold,
                    match_mode,
                })
                .await?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Report(args) => {
            let mut results = Vec::new();
            for file in run_files(&args.runs)? {
                let result: RunResult =
                    serde_json::from_str(&read(&file)?).map_err(|e| format!("{}: {e}", file.display()))?;
                results.push(result);
            }
            let table = client
                .report(&ReportRequest {
                    results,
                    run_ids: vec![],
                    format: args.format,
                })
                .await?;
            print!("{table}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli).await {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}
