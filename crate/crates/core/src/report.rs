//! Result tables: one row per (strategy, k, pool size, model).

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::RunResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Md,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "md" | "markdown" => Ok(ReportFormat::Md),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub strategy: String,
    pub k: usize,
    pub pool_size: usize,
    pub model: String,
    pub weighted_f1: f64,
    pub micro_f1: f64,
    pub hallucination_rate: f64,
    pub n_sentences: usize,
    pub complete: bool,
}

pub const COLUMNS: [&str; 9] = [
    "strategy",
    "k",
    "pool_size",
    "model",
    "weighted_f1",
    "micro_f1",
    "hallucination_rate",
    "n_sentences",
    "complete",
];

impl ReportRow {
    fn cells(&self) -> [String; 9] {
        [
            self.strategy.clone(),
            self.k.to_string(),
            self.pool_size.to_string(),
            self.model.clone(),
            format!("{:.6}", self.weighted_f1),
            format!("{:.6}", self.micro_f1),
            format!("{:.6}", self.hallucination_rate),
            self.n_sentences.to_string(),
            self.complete.to_string(),
        ]
    }
}

/// Rows sorted by (strategy, k, pool size, model); the sort is stable.
pub fn rows(results: &[RunResult]) -> Vec<ReportRow> {
    let mut rows: Vec<ReportRow> = results
        .iter()
        .flat_map(|r| {
            r.points.iter().map(move |p| ReportRow {
                strategy: r.config.strategy.to_string(),
                k: p.k,
                pool_size: r.pool_len,
                model: r.model.clone(),
                weighted_f1: p.report.weighted_f1,
                micro_f1: p.report.micro_f1,
                hallucination_rate: p.report.hallucination_rate,
                n_sentences: p.n_evaluated,
                complete: p.complete,
            })
        })
        .collect();
    rows.sort_by(|a, b| {
        (a.strategy.as_str(), a.k, a.pool_size, a.model.as_str())
            .cmp(&(b.strategy.as_str(), b.k, b.pool_size, b.model.as_str()))
    });
    rows
}

pub fn report(results: &[RunResult], format: ReportFormat) -> String {
    let rows = rows(results);
    match format {
        ReportFormat::Csv => {
            let mut writer = csv::Writer::from_writer(Vec::new());
            writer.write_record(COLUMNS).expect("in-memory write");
            for row in &rows {
                writer.write_record(row.cells()).expect("in-memory write");
            }
            String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("cells are UTF-8")
        }
        ReportFormat::Json => {
            let mut out = serde_json::to_string_pretty(&rows).expect("rows serialize");
            out.push('\n');
            out
        }
        ReportFormat::Md => {
            let mut out = String::new();
            let _ = writeln!(out, "| {} |", COLUMNS.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(COLUMNS.len()));
            for row in &rows {
                let cells: Vec<String> = row.cells().iter().map(|c| c.replace('|', "\\|")).collect();
                let _ = writeln!(out, "| {} |", cells.join(" | "));
            }
            out
        }
    }
}
