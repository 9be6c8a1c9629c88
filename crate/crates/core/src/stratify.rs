//! Stratified few-shot pool construction.
//!
//! Entity types are visited round-robin from most to least frequent; each turn
//! takes the lowest-id unselected sentence containing that type.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    parse_jsonl, spans_to_tags, type_frequencies, Corpus, EntityType, Tag, TagScheme, TaggedSentence,
};
use crate::error::{Error, Result};

pub const DEFAULT_POOL_SIZE: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedDataset {
    /// Selected sentences in selection order. Each keeps its original corpus id.
    pub examples: Vec<TaggedSentence>,
    pub source_ids: Vec<usize>,
    /// The type whose turn selected each example, parallel to `examples`.
    pub credits: Vec<Option<EntityType>>,
    pub per_type_counts: BTreeMap<EntityType, usize>,
    pub target_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TypeCoverage {
    pub selected_sentences: usize,
    pub span_count: usize,
}

/// Types ordered by descending span frequency, ties by name.
pub fn frequency_order(corpus: &Corpus) -> Vec<(EntityType, usize)> {
    let mut order: Vec<_> = type_frequencies(corpus).into_iter().collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    order
}

pub fn build_stratified(corpus: &Corpus, target_size: usize) -> Result<StratifiedDataset> {
    if target_size == 0 {
        return Err(Error::Config("target size must be at least 1".into()));
    }
    let order = frequency_order(corpus);
    if order.is_empty() {
        return Err(Error::NoEntities);
    }

    let mut queues: Vec<(EntityType, VecDeque<usize>)> = order
        .iter()
        .map(|(etype, _)| {
            let ids = corpus
                .sentences
                .iter()
                .filter(|s| s.contains_type(etype))
                .map(|s| s.id)
                .collect();
            (etype.clone(), ids)
        })
        .collect();

    let mut per_type_counts: BTreeMap<EntityType, usize> =
        order.iter().map(|(t, _)| (t.clone(), 0)).collect();
    let mut taken = BTreeSet::new();
    let mut examples = Vec::new();
    let mut credits = Vec::new();

    'rounds: loop {
        let mut progressed = false;
        for (etype, queue) in &mut queues {
            if examples.len() >= target_size {
                break 'rounds;
            }
            while let Some(id) = queue.pop_front() {
                if taken.insert(id) {
                    examples.push(corpus.sentences[id].clone());
                    credits.push(Some(etype.clone()));
                    *per_type_counts.get_mut(etype).expect("type registered") += 1;
                    progressed = true;
                    break;
                }
            }
        }
        if !progressed {
            break;
        }
    }

    let source_ids = examples.iter().map(|s| s.id).collect();
    Ok(StratifiedDataset {
        examples,
        source_ids,
        credits,
        per_type_counts,
        target_size,
    })
}

impl StratifiedDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn label_set(&self) -> BTreeSet<EntityType> {
        self.examples
            .iter()
            .flat_map(|s| s.spans.iter().map(|sp| sp.etype.clone()))
            .collect()
    }

    /// One JSON object per example: `tokens`, BIO `labels`, `source_id` and `credit`.
    /// The output is readable by [`parse_jsonl`].
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.examples.iter().enumerate() {
            let labels: Vec<String> = spans_to_tags(&s.spans, s.tokens.len(), TagScheme::Bio)
                .iter()
                .map(Tag::to_string)
                .collect();
            let line = serde_json::json!({
                "tokens": s.tokens,
                "labels": labels,
                "source_id": self.source_ids[i],
                "credit": self.credits[i],
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }

    /// Loads a pool written by [`StratifiedDataset::to_jsonl`]. Plain `tokens`/`labels`
    /// JSON-lines files also load: source ids default to the line order and each
    /// example is credited to its first span's type.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            source_id: Option<usize>,
            credit: Option<EntityType>,
        }
        let corpus = parse_jsonl(text)?;
        let metas = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(idx, l)| {
                serde_json::from_str::<Meta>(l).map_err(|e| Error::Malformed {
                    line: idx + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_parts(corpus, metas.into_iter().map(|m| (m.source_id, m.credit))))
    }

    /// Treats every sentence of `corpus` as a pool example, in corpus order.
    pub fn from_corpus(corpus: Corpus) -> Self {
        let n = corpus.len();
        Self::from_parts(corpus, std::iter::repeat_n((None, None), n))
    }

    fn from_parts(
        corpus: Corpus,
        metas: impl Iterator<Item = (Option<usize>, Option<EntityType>)>,
    ) -> Self {
        let mut examples = Vec::with_capacity(corpus.len());
        let mut source_ids = Vec::with_capacity(corpus.len());
        let mut credits = Vec::with_capacity(corpus.len());
        let mut per_type_counts = BTreeMap::new();
        for (mut s, (source, credit)) in corpus.sentences.into_iter().zip(metas) {
            let credit = credit.or_else(|| s.spans.first().map(|sp| sp.etype.clone()));
            if let Some(t) = &credit {
                *per_type_counts.entry(t.clone()).or_insert(0) += 1;
            }
            s.id = source.unwrap_or(s.id);
            source_ids.push(s.id);
            credits.push(credit);
            examples.push(s);
        }
        let target_size = examples.len();
        StratifiedDataset {
            examples,
            source_ids,
            credits,
            per_type_counts,
            target_size,
        }
    }
}

/// Per-type containment in the selected pool, for every type in the corpus label set.
pub fn coverage_report(ds: &StratifiedDataset, corpus: &Corpus) -> BTreeMap<EntityType, TypeCoverage> {
    let mut report: BTreeMap<EntityType, TypeCoverage> = corpus
        .label_set
        .iter()
        .map(|t| (t.clone(), TypeCoverage::default()))
        .collect();
    for s in &ds.examples {
        let mut seen = BTreeSet::new();
        for span in &s.spans {
            let entry = report.entry(span.etype.clone()).or_default();
            entry.span_count += 1;
            if seen.insert(&span.etype) {
                entry.selected_sentences += 1;
            }
        }
    }
    report
}
