//! Span-level scoring: per-type precision/recall/F1, support-weighted F1 and micro F1.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{EntitySpan, EntityType, TaggedSentence};
use crate::error::{Error, Result};
use crate::parse::ParseReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// How a predicted span must relate to a gold span to count as correct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Same boundaries and type.
    #[default]
    Exact,
    /// Same type and at least one shared token.
    Overlap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeMetrics {
    pub etype: EntityType,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

impl TypeMetrics {
    pub fn from_counts(etype: EntityType, c: Counts) -> Self {
        let (precision, recall, f1) = prf(c);
        TypeMetrics {
            etype,
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            precision,
            recall,
            f1,
            support: c.tp + c.fn_,
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn prf(c: Counts) -> (f64, f64, f64) {
    let p = ratio(c.tp, c.tp + c.fp);
    let r = ratio(c.tp, c.tp + c.fn_);
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Sorted by type name; includes types that were only predicted.
    pub per_type: Vec<TypeMetrics>,
    pub weighted_f1: f64,
    pub micro_f1: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub hallucination_rate: f64,
    pub hallucinated: usize,
    pub predicted: usize,
    pub n_sentences: usize,
}

/// Per-type counts for one sentence. Each gold span matches at most one prediction.
pub fn match_spans(pred: &[EntitySpan], gold: &[EntitySpan]) -> BTreeMap<EntityType, Counts> {
    match_spans_with(pred, gold, MatchMode::Exact)
}

pub fn match_spans_with(pred: &[EntitySpan], gold: &[EntitySpan], mode: MatchMode) -> BTreeMap<EntityType, Counts> {
    let mut counts: BTreeMap<EntityType, Counts> = BTreeMap::new();
    let mut used = vec![false; gold.len()];
    for p in pred {
        let hit = gold.iter().enumerate().position(|(i, g)| {
            !used[i]
                && g.etype == p.etype
                && match mode {
                    MatchMode::Exact => g.start == p.start && g.end == p.end,
                    MatchMode::Overlap => g.overlaps(p),
                }
        });
        let entry = counts.entry(p.etype.clone()).or_default();
        match hit {
            Some(i) => {
                used[i] = true;
                entry.tp += 1;
            }
            None => entry.fp += 1,
        }
    }
    for (g, matched) in gold.iter().zip(used) {
        if !matched {
            counts.entry(g.etype.clone()).or_default().fn_ += 1;
        }
    }
    counts
}

pub fn evaluate(preds: &[ParseReport], gold: &[TaggedSentence]) -> Result<EvalReport> {
    evaluate_with(preds, gold, MatchMode::Exact)
}

pub fn evaluate_with(preds: &[ParseReport], gold: &[TaggedSentence], mode: MatchMode) -> Result<EvalReport> {
    if preds.len() != gold.len() {
        return Err(Error::PredictionCount {
            expected: gold.len(),
            actual: preds.len(),
        });
    }
    let mut totals: BTreeMap<EntityType, Counts> = BTreeMap::new();
    let (mut hallucinated, mut predicted) = (0, 0);
    for (report, sentence) in preds.iter().zip(gold) {
        for (t, c) in match_spans_with(&report.predicted_spans(), &sentence.spans, mode) {
            totals.entry(t).or_default().add(c);
        }
        hallucinated += report.hallucinated_count;
        predicted += report.entities.len();
    }
    Ok(summarize(totals, hallucinated, predicted, gold.len()))
}

/// Builds a report from pooled per-type counts.
pub fn summarize(
    totals: BTreeMap<EntityType, Counts>,
    hallucinated: usize,
    predicted: usize,
    n_sentences: usize,
) -> EvalReport {
    let mut pooled = Counts::default();
    for c in totals.values() {
        pooled.add(*c);
    }
    let per_type: Vec<TypeMetrics> = totals
        .into_iter()
        .map(|(t, c)| TypeMetrics::from_counts(t, c))
        .collect();
    let support: usize = per_type.iter().map(|m| m.support).sum();
    let weighted_f1 = if support == 0 {
        0.0
    } else {
        per_type.iter().map(|m| m.support as f64 * m.f1).sum::<f64>() / support as f64
    };
    let (micro_precision, micro_recall, micro_f1) = prf(pooled);
    EvalReport {
        per_type,
        weighted_f1,
        micro_f1,
        micro_precision,
        micro_recall,
        hallucination_rate: ratio(hallucinated, predicted),
        hallucinated,
        predicted,
        n_sentences,
    }
}

impl EvalReport {
    pub fn total_support(&self) -> usize {
        self.per_type.iter().map(|m| m.support).sum()
    }
}
