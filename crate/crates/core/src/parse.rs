//! Completion parsing: turns free-form `entity :: TYPE` output into spans.
//!
//! Parsing is total. Numbered or bulleted lines, markdown emphasis, type-first
//! lines and a lone `:` separator are normalized; anything that still does not
//! fit is counted rather than rejected.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{EntitySpan, EntityType};
use crate::prompt::NO_ENTITIES;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedEntity {
    pub surface: String,
    pub etype: EntityType,
    /// Location in the input sentence; `None` when the surface text is not found.
    pub aligned: Option<EntitySpan>,
}

impl ParsedEntity {
    pub fn is_hallucinated(&self) -> bool {
        self.aligned.is_none()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub entities: Vec<ParsedEntity>,
    pub hallucinated_count: usize,
    pub unknown_type_count: usize,
    pub malformed_line_count: usize,
    /// Repeated `(surface, type)` lines that could not be placed at a new position.
    #[serde(default)]
    pub duplicate_count: usize,
}

impl ParseReport {
    /// Spans of all aligned entities, sorted by start.
    pub fn predicted_spans(&self) -> Vec<EntitySpan> {
        let mut spans: Vec<EntitySpan> = self.entities.iter().filter_map(|e| e.aligned.clone()).collect();
        spans.sort();
        spans
    }

    /// `(surface, type)` pairs, sorted, for multiset comparisons.
    pub fn pairs(&self) -> Vec<(String, EntityType)> {
        let mut pairs: Vec<_> = self
            .entities
            .iter()
            .map(|e| (e.surface.clone(), e.etype.clone()))
            .collect();
        pairs.sort();
        pairs
    }
}

/// Removes list markers (`1.`, `1)`, `-`, `*`, `+`, `•`) and markdown emphasis.
fn strip_decorations(line: &str) -> &str {
    let mut s = line.trim();
    loop {
        let before = s;
        for marker in ["- ", "* ", "+ ", "• ", "-\t", "*\t"] {
            if let Some(rest) = s.strip_prefix(marker) {
                s = rest.trim_start();
            }
        }
        let digits = s.bytes().take_while(u8::is_ascii_digit).count();
        if digits > 0 && digits < s.len() {
            let rest = &s[digits..];
            if let Some(rest) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
                if rest.starts_with(char::is_whitespace) || rest.is_empty() {
                    s = rest.trim_start();
                }
            }
        }
        if s == before {
            return s;
        }
    }
}

fn strip_emphasis(s: &str) -> String {
    let cleaned = s.replace("**", "").replace("__", "").replace('`', "");
    cleaned
        .trim()
        .trim_matches(|c| c == '*' || c == '_' || c == '"' || c == '\'')
        .trim()
        .to_string()
}

fn split_pair(line: &str) -> Option<(&str, &str)> {
    if let Some(pair) = line.split_once("::") {
        return Some(pair);
    }
    line.rsplit_once(':')
}

fn resolve_label<'a>(candidate: &str, labels: &'a BTreeSet<EntityType>) -> Option<&'a EntityType> {
    labels.iter().find(|l| l.as_str() == candidate).or_else(|| {
        labels
            .iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(candidate))
    })
}

/// Parses a completion against the label set and input tokens, aligning every entity.
pub fn parse_completion(text: &str, label_set: &BTreeSet<EntityType>, input_tokens: &[String]) -> ParseReport {
    let mut report = ParseReport::default();
    let mut claimed = vec![false; input_tokens.len()];
    let mut seen: HashMap<(String, EntityType), usize> = HashMap::new();

    for raw_line in text.lines() {
        let line = strip_decorations(raw_line);
        if line.is_empty() {
            continue;
        }
        if strip_emphasis(line).eq_ignore_ascii_case(NO_ENTITIES) {
            continue;
        }
        let Some((left, right)) = split_pair(line) else {
            report.malformed_line_count += 1;
            continue;
        };
        let (mut surface, mut etype) = (strip_emphasis(left), strip_emphasis(right));
        let left_is_label = resolve_label(&surface, label_set).is_some();
        let right_is_label = resolve_label(&etype, label_set).is_some();
        if left_is_label && !right_is_label {
            std::mem::swap(&mut surface, &mut etype);
        }
        if surface.is_empty() || etype.is_empty() {
            report.malformed_line_count += 1;
            continue;
        }
        let Some(label) = resolve_label(&etype, label_set) else {
            report.unknown_type_count += 1;
            continue;
        };

        let aligned = align_one(&surface, label, input_tokens, &mut claimed);
        let key = (surface.clone(), label.clone());
        let repeats = seen.entry(key).or_insert(0);
        *repeats += 1;
        if *repeats > 1 && aligned.is_none() {
            report.duplicate_count += 1;
            continue;
        }
        if aligned.is_none() {
            report.hallucinated_count += 1;
        }
        report.entities.push(ParsedEntity {
            surface,
            etype: label.clone(),
            aligned,
        });
    }
    report
}

/// Leftmost case-insensitive match of `surface`'s whitespace tokens over unclaimed
/// positions. Marks the matched positions as claimed.
fn align_one(surface: &str, etype: &EntityType, tokens: &[String], claimed: &mut [bool]) -> Option<EntitySpan> {
    let needle: Vec<String> = surface.split_whitespace().map(str::to_lowercase).collect();
    if needle.is_empty() || needle.len() > tokens.len() {
        return None;
    }
    let start = (0..=tokens.len() - needle.len()).find(|&start| {
        needle.iter().enumerate().all(|(j, word)| {
            !claimed[start + j] && tokens[start + j].to_lowercase() == *word
        })
    })?;
    claimed[start..start + needle.len()].fill(true);
    Some(EntitySpan::new(start, start + needle.len(), etype.clone()))
}

/// Re-aligns parsed entities against `input_tokens`, in order, with fresh claims.
pub fn align(entities: &[ParsedEntity], input_tokens: &[String]) -> Vec<ParsedEntity> {
    let mut claimed = vec![false; input_tokens.len()];
    entities
        .iter()
        .map(|e| ParsedEntity {
            aligned: align_one(&e.surface, &e.etype, input_tokens, &mut claimed),
            ..e.clone()
        })
        .collect()
}
