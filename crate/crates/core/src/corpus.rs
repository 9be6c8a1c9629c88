//! NER corpora: entity types, spans, tagged sentences, and the CoNLL / JSON-lines readers.
//!
//! Spans are the canonical representation. Tag sequences (BIO or BIOES) are
//! decoded once at parse time and can be re-encoded with [`spans_to_tags`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An entity label such as `MATE` or `Component`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct EntityType(String);

impl EntityType {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::InvalidEntityType(name));
        }
        Ok(EntityType(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for EntityType {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        EntityType::new(value)
    }
}

impl From<EntityType> for String {
    fn from(value: EntityType) -> Self {
        value.0
    }
}

impl FromStr for EntityType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EntityType::new(s)
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for EntityType {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// Half-open token range `[start, end)` carrying an entity type.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub etype: EntityType,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, etype: EntityType) -> Self {
        EntitySpan { start, end, etype }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn overlaps(&self, other: &EntitySpan) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSentence {
    pub id: usize,
    pub tokens: Vec<String>,
    pub spans: Vec<EntitySpan>,
}

impl TaggedSentence {
    /// Builds a sentence and checks the token/span invariants.
    pub fn new(id: usize, tokens: Vec<String>, mut spans: Vec<EntitySpan>) -> Result<Self> {
        spans.sort();
        let sentence = TaggedSentence { id, tokens, spans };
        sentence.validate()?;
        Ok(sentence)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Error::Malformed {
            line: self.id + 1,
            message,
        };
        if self.tokens.is_empty() {
            return Err(bad("sentence has no tokens".into()));
        }
        if let Some(i) = self.tokens.iter().position(String::is_empty) {
            return Err(bad(format!("token {i} is empty")));
        }
        for span in &self.spans {
            if span.start >= span.end || span.end > self.tokens.len() {
                return Err(bad(format!(
                    "span ({}, {}) out of bounds for {} tokens",
                    span.start,
                    span.end,
                    self.tokens.len()
                )));
            }
        }
        for pair in self.spans.windows(2) {
            if pair[0].start > pair[1].start {
                return Err(bad("spans are not sorted".into()));
            }
            if pair[0].overlaps(&pair[1]) {
                return Err(bad(format!(
                    "spans ({}, {}) and ({}, {}) overlap",
                    pair[0].start, pair[0].end, pair[1].start, pair[1].end
                )));
            }
        }
        Ok(())
    }

    /// Tokens joined by single spaces.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn span_text(&self, span: &EntitySpan) -> String {
        self.tokens[span.start..span.end].join(" ")
    }

    pub fn contains_type(&self, etype: &EntityType) -> bool {
        self.spans.iter().any(|s| &s.etype == etype)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagScheme {
    Bio,
    Bioes,
}

/// Scheme requested by the caller; `Auto` picks BIOES iff an `E-` or `S-` tag appears.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeChoice {
    Bio,
    Bioes,
    #[default]
    Auto,
}

impl FromStr for SchemeChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bio" | "iob" | "iob2" => Ok(SchemeChoice::Bio),
            "bioes" | "iobes" => Ok(SchemeChoice::Bioes),
            "auto" => Ok(SchemeChoice::Auto),
            other => Err(Error::Config(format!("unknown tag scheme {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    #[default]
    Conll,
    Jsonl,
}

impl CorpusFormat {
    /// `.jsonl` / `.json` files are JSON-lines, everything else is CoNLL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") | Some("ndjson") => CorpusFormat::Jsonl,
            _ => CorpusFormat::Conll,
        }
    }
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "conll" | "bio" | "txt" => Ok(CorpusFormat::Conll),
            "jsonl" | "json" => Ok(CorpusFormat::Jsonl),
            other => Err(Error::Config(format!("unknown corpus format {other:?}"))),
        }
    }
}

/// A single token tag.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Tag {
    Outside,
    Begin(EntityType),
    Inside(EntityType),
    End(EntityType),
    Single(EntityType),
}

impl Tag {
    /// Parses `O`, `B-X`, `I-X`, `E-X` or `S-X`. Returns `None` for anything else.
    pub fn parse(raw: &str) -> Option<Tag> {
        if raw == "O" {
            return Some(Tag::Outside);
        }
        let (prefix, name) = raw.split_once('-')?;
        let etype = EntityType::new(name).ok()?;
        match prefix {
            "B" => Some(Tag::Begin(etype)),
            "I" => Some(Tag::Inside(etype)),
            "E" => Some(Tag::End(etype)),
            "S" => Some(Tag::Single(etype)),
            _ => None,
        }
    }

    fn is_bioes_only(&self) -> bool {
        matches!(self, Tag::End(_) | Tag::Single(_))
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::Outside => f.write_str("O"),
            Tag::Begin(t) => write!(f, "B-{t}"),
            Tag::Inside(t) => write!(f, "I-{t}"),
            Tag::End(t) => write!(f, "E-{t}"),
            Tag::Single(t) => write!(f, "S-{t}"),
        }
    }
}

/// Decodes a tag sequence into spans, repairing malformed transitions.
///
/// An `I-X` (or `E-X`) that does not continue an open `X` span starts a new
/// span and counts one repair. Under BIOES a span that is closed by anything
/// other than `E-` also counts as a repair. Returns `(spans, repairs)`.
pub fn tags_to_spans(tags: &[Tag], scheme: TagScheme) -> (Vec<EntitySpan>, usize) {
    let strict_close = scheme == TagScheme::Bioes;
    let mut spans = Vec::new();
    let mut repairs = 0;
    let mut open: Option<(usize, EntityType)> = None;

    let close = |open: &mut Option<(usize, EntityType)>, end: usize, spans: &mut Vec<EntitySpan>, implicit: bool| -> usize {
        match open.take() {
            Some((start, etype)) => {
                spans.push(EntitySpan::new(start, end, etype));
                usize::from(implicit && strict_close)
            }
            None => 0,
        }
    };

    for (i, tag) in tags.iter().enumerate() {
        match tag {
            Tag::Outside => repairs += close(&mut open, i, &mut spans, true),
            Tag::Begin(t) => {
                repairs += close(&mut open, i, &mut spans, true);
                open = Some((i, t.clone()));
            }
            Tag::Inside(t) => {
                if !matches!(&open, Some((_, cur)) if cur == t) {
                    repairs += close(&mut open, i, &mut spans, true) + 1;
                    open = Some((i, t.clone()));
                }
            }
            Tag::End(t) => {
                if matches!(&open, Some((_, cur)) if cur == t) {
                    close(&mut open, i + 1, &mut spans, false);
                } else {
                    repairs += close(&mut open, i, &mut spans, true) + 1;
                    spans.push(EntitySpan::new(i, i + 1, t.clone()));
                }
            }
            Tag::Single(t) => {
                repairs += close(&mut open, i, &mut spans, true);
                spans.push(EntitySpan::new(i, i + 1, t.clone()));
            }
        }
    }
    repairs += close(&mut open, tags.len(), &mut spans, true);
    (spans, repairs)
}

/// Encodes spans as tags. `spans` must be sorted and non-overlapping.
pub fn spans_to_tags(spans: &[EntitySpan], len: usize, scheme: TagScheme) -> Vec<Tag> {
    let mut tags = vec![Tag::Outside; len];
    for span in spans {
        let t = &span.etype;
        match scheme {
            TagScheme::Bio => {
                tags[span.start] = Tag::Begin(t.clone());
                for tag in &mut tags[span.start + 1..span.end] {
                    *tag = Tag::Inside(t.clone());
                }
            }
            TagScheme::Bioes => {
                if span.len() == 1 {
                    tags[span.start] = Tag::Single(t.clone());
                } else {
                    tags[span.start] = Tag::Begin(t.clone());
                    for tag in &mut tags[span.start + 1..span.end - 1] {
                        *tag = Tag::Inside(t.clone());
                    }
                    tags[span.end - 1] = Tag::End(t.clone());
                }
            }
        }
    }
    tags
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub sentences: Vec<TaggedSentence>,
    pub label_set: BTreeSet<EntityType>,
    pub scheme: TagScheme,
    /// Number of malformed tag transitions repaired while decoding.
    #[serde(default)]
    pub repairs: usize,
}

/// One sentence worth of raw tags with the source line each tag came from.
struct RawSentence {
    tokens: Vec<String>,
    tags: Vec<(usize, String)>,
}

impl Corpus {
    /// Builds a corpus from already-decoded sentences, renumbering ids to `0..len`.
    pub fn from_sentences(sentences: Vec<TaggedSentence>, scheme: TagScheme) -> Result<Self> {
        let mut label_set = BTreeSet::new();
        let mut renumbered = Vec::with_capacity(sentences.len());
        for (id, s) in sentences.into_iter().enumerate() {
            let s = TaggedSentence::new(id, s.tokens, s.spans)?;
            label_set.extend(s.spans.iter().map(|sp| sp.etype.clone()));
            renumbered.push(s);
        }
        Ok(Corpus {
            sentences: renumbered,
            label_set,
            scheme,
            repairs: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn load(path: &Path, format: Option<CorpusFormat>, scheme: SchemeChoice) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match format.unwrap_or_else(|| CorpusFormat::from_path(path)) {
            CorpusFormat::Conll => parse_conll(&text, scheme),
            CorpusFormat::Jsonl => parse_jsonl(&text),
        }
    }

    pub fn parse(text: &str, format: CorpusFormat, scheme: SchemeChoice) -> Result<Self> {
        match format {
            CorpusFormat::Conll => parse_conll(text, scheme),
            CorpusFormat::Jsonl => parse_jsonl(text),
        }
    }

    /// JSON-lines with `tokens` and `labels` fields, labels in this corpus's scheme.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            let labels: Vec<String> = spans_to_tags(&s.spans, s.tokens.len(), self.scheme)
                .iter()
                .map(Tag::to_string)
                .collect();
            let line = serde_json::json!({ "tokens": s.tokens, "labels": labels });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }

    pub fn to_conll(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.sentences.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let tags = spans_to_tags(&s.spans, s.tokens.len(), self.scheme);
            for (token, tag) in s.tokens.iter().zip(&tags) {
                out.push_str(token);
                out.push(' ');
                out.push_str(&tag.to_string());
                out.push('\n');
            }
        }
        out
    }
}

fn decode(raw: Vec<RawSentence>, scheme: SchemeChoice) -> Result<Corpus> {
    if raw.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut parsed = Vec::with_capacity(raw.len());
    let mut any_bioes = false;
    for sentence in &raw {
        let mut tags = Vec::with_capacity(sentence.tags.len());
        for (line, text) in &sentence.tags {
            let tag = Tag::parse(text).ok_or_else(|| Error::UnknownTag {
                line: *line,
                tag: text.clone(),
            })?;
            if tag.is_bioes_only() {
                if scheme == SchemeChoice::Bio {
                    return Err(Error::UnknownTag {
                        line: *line,
                        tag: text.clone(),
                    });
                }
                any_bioes = true;
            }
            tags.push(tag);
        }
        parsed.push(tags);
    }
    let resolved = match scheme {
        SchemeChoice::Bio => TagScheme::Bio,
        SchemeChoice::Bioes => TagScheme::Bioes,
        SchemeChoice::Auto if any_bioes => TagScheme::Bioes,
        SchemeChoice::Auto => TagScheme::Bio,
    };

    let mut repairs = 0;
    let mut label_set = BTreeSet::new();
    let mut sentences = Vec::with_capacity(raw.len());
    for (id, (sentence, tags)) in raw.into_iter().zip(parsed).enumerate() {
        let (spans, fixed) = tags_to_spans(&tags, resolved);
        repairs += fixed;
        label_set.extend(spans.iter().map(|s| s.etype.clone()));
        let first_line = sentence.tags.first().map_or(0, |(l, _)| *l);
        let tagged = TaggedSentence::new(id, sentence.tokens, spans).map_err(|e| match e {
            Error::Malformed { message, .. } => Error::Malformed {
                line: first_line,
                message,
            },
            other => other,
        })?;
        sentences.push(tagged);
    }
    Ok(Corpus {
        sentences,
        label_set,
        scheme: resolved,
        repairs,
    })
}

/// Parses token-per-line text: the first column is the token, the last column the tag,
/// and blank lines separate sentences. `-DOCSTART-` lines are skipped.
pub fn parse_conll(text: &str, scheme: SchemeChoice) -> Result<Corpus> {
    let mut raw = Vec::new();
    let mut current = RawSentence {
        tokens: Vec::new(),
        tags: Vec::new(),
    };
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            if !current.tokens.is_empty() {
                raw.push(std::mem::replace(
                    &mut current,
                    RawSentence {
                        tokens: Vec::new(),
                        tags: Vec::new(),
                    },
                ));
            }
            continue;
        }
        if fields[0] == "-DOCSTART-" {
            continue;
        }
        if fields.len() < 2 {
            return Err(Error::Malformed {
                line: line_no,
                message: "expected a token and a tag".into(),
            });
        }
        current.tokens.push(fields[0].to_string());
        current
            .tags
            .push((line_no, fields[fields.len() - 1].to_string()));
    }
    if !current.tokens.is_empty() {
        raw.push(current);
    }
    decode(raw, scheme)
}

#[derive(Deserialize)]
struct JsonLine {
    tokens: Vec<String>,
    labels: Vec<String>,
}

/// Parses one `{"tokens": [...], "labels": [...]}` object per line. The tag scheme is
/// detected automatically and blank lines are ignored.
pub fn parse_jsonl(text: &str) -> Result<Corpus> {
    let mut raw = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonLine = serde_json::from_str(line).map_err(|e| Error::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if record.tokens.len() != record.labels.len() {
            return Err(Error::LengthMismatch { line: line_no });
        }
        raw.push(RawSentence {
            tokens: record.tokens,
            tags: record.labels.into_iter().map(|l| (line_no, l)).collect(),
        });
    }
    decode(raw, SchemeChoice::Auto)
}

/// Number of span occurrences per type across the corpus.
pub fn type_frequencies(corpus: &Corpus) -> BTreeMap<EntityType, usize> {
    let mut freq = BTreeMap::new();
    for span in corpus.sentences.iter().flat_map(|s| &s.spans) {
        *freq.entry(span.etype.clone()).or_insert(0) += 1;
    }
    freq
}
