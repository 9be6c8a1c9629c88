//! Prompt assembly.
//!
//! A prompt has four blocks separated by blank lines: the task description
//! (with output-format instructions), the entity-type enumeration, the few-shot
//! examples, and the input sentence left open at `Entities:`.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{EntityType, TaggedSentence};
use crate::error::{Error, Result};

/// Separator between an entity's text and its type in rendered examples and completions.
pub const ENTITY_SEPARATOR: &str = " :: ";
pub const NO_ENTITIES: &str = "NONE";

pub const FORMAT_INSTRUCTIONS: &str = "Answer with one entity per line in the format `<entity text> :: <TYPE>`, \
copying the entity text exactly as it appears in the sentence. \
Do not number the lines and do not add any other text. \
If the sentence contains no entities, answer NONE.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityTypeSpec {
    pub name: EntityType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gloss: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    /// May contain `{domain}`, replaced by `domain_name`.
    pub task_description: String,
    pub domain_name: String,
    pub entity_types: Vec<EntityTypeSpec>,
    #[serde(default = "default_example_header")]
    pub example_header: String,
    #[serde(default = "default_input_header")]
    pub input_header: String,
}

fn default_example_header() -> String {
    "Examples:".into()
}

fn default_input_header() -> String {
    "Input:".into()
}

const BUILTIN: &[(&str, &str)] = &[
    ("fabner", include_str!("../templates/fabner.json")),
    ("thin-film", include_str!("../templates/thin-film.json")),
    ("assembly", include_str!("../templates/assembly.json")),
];

impl PromptTemplate {
    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(name, _)| *name)
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let (_, json) = BUILTIN
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Template(format!("no built-in template named {name:?}")))?;
        Ok(serde_json::from_str(json)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Template with no glosses for an arbitrary label set.
    pub fn generic(domain_name: &str, label_set: &BTreeSet<EntityType>) -> Self {
        PromptTemplate {
            task_description: "You are an expert in {domain}. Extract the named entities from the input \
                               sentence and assign each of them one of the entity types listed below."
                .into(),
            domain_name: domain_name.into(),
            entity_types: label_set
                .iter()
                .map(|t| EntityTypeSpec { name: t.clone(), gloss: None })
                .collect(),
            example_header: default_example_header(),
            input_header: default_input_header(),
        }
    }

    /// Aligns the template with a corpus label set: labels the corpus lacks are an
    /// error, labels the template lacks are appended without a gloss.
    pub fn reconcile(mut self, label_set: &BTreeSet<EntityType>) -> Result<Self> {
        let declared: BTreeSet<&EntityType> = self.entity_types.iter().map(|s| &s.name).collect();
        if declared.len() != self.entity_types.len() {
            return Err(Error::Template("duplicate entity type in template".into()));
        }
        let unknown: Vec<&str> = declared
            .iter()
            .filter(|t| !label_set.contains(**t))
            .map(|t| t.as_str())
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Template(format!(
                "template declares types not in the corpus: {}",
                unknown.join(", ")
            )));
        }
        let missing: Vec<EntityType> = label_set
            .iter()
            .filter(|t| !declared.contains(t))
            .cloned()
            .collect();
        if !missing.is_empty() {
            tracing::warn!(count = missing.len(), "appending corpus labels missing from the template");
        }
        self.entity_types
            .extend(missing.into_iter().map(|name| EntityTypeSpec { name, gloss: None }));
        if self.entity_types.is_empty() {
            return Err(Error::Template("no entity types".into()));
        }
        Ok(self)
    }

    pub fn label_set(&self) -> BTreeSet<EntityType> {
        self.entity_types.iter().map(|s| s.name.clone()).collect()
    }

    fn task_block(&self) -> String {
        let task = self.task_description.replace("{domain}", &self.domain_name);
        format!("{task}\n{FORMAT_INSTRUCTIONS}")
    }

    fn types_block(&self) -> String {
        let list: Vec<String> = self
            .entity_types
            .iter()
            .map(|s| match &s.gloss {
                Some(g) => format!("{} ({g})", s.name),
                None => s.name.to_string(),
            })
            .collect();
        format!("Entity types: {}", list.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    /// Ids of the rendered examples, in rendered order.
    pub example_ids: Vec<usize>,
    /// Rough token count (characters / 4, rounded up).
    pub token_estimate: usize,
}

/// `entity :: TYPE` lines for each span in start order, or `NONE`.
pub fn render_entities(s: &TaggedSentence) -> String {
    if s.spans.is_empty() {
        return NO_ENTITIES.to_string();
    }
    s.spans
        .iter()
        .map(|span| format!("{}{ENTITY_SEPARATOR}{}", s.span_text(span), span.etype))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_example(s: &TaggedSentence) -> String {
    format!("Sentence: {}\nEntities:\n{}", s.text(), render_entities(s))
}

/// Builds the prompt. `example_ids` is filled from each example's `id`.
pub fn build_prompt(
    tmpl: &PromptTemplate,
    examples: &[&TaggedSentence],
    input: &TaggedSentence,
) -> RenderedPrompt {
    let ids: Vec<usize> = examples.iter().map(|s| s.id).collect();
    build_prompt_with_ids(tmpl, examples, ids, input)
}

/// Like [`build_prompt`], recording caller-supplied ids (e.g. pool indices).
pub fn build_prompt_with_ids(
    tmpl: &PromptTemplate,
    examples: &[&TaggedSentence],
    example_ids: Vec<usize>,
    input: &TaggedSentence,
) -> RenderedPrompt {
    debug_assert_eq!(examples.len(), example_ids.len());
    let mut blocks = vec![tmpl.task_block(), tmpl.types_block()];
    if !examples.is_empty() {
        let rendered: Vec<String> = examples.iter().map(|s| render_example(s)).collect();
        blocks.push(format!("{}\n\n{}", tmpl.example_header, rendered.join("\n\n")));
    }
    blocks.push(format!("{}\nSentence: {}\nEntities:", tmpl.input_header, input.text()));
    let text = blocks.join("\n\n");
    RenderedPrompt {
        token_estimate: text.chars().count().div_ceil(4),
        text,
        example_ids,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EntitySpan;

    fn et(s: &str) -> EntityType {
        EntityType::new(s).unwrap()
    }

    fn sent(id: usize, text: &str, spans: &[(usize, usize, &str)]) -> TaggedSentence {
        TaggedSentence::new(
            id,
            text.split(' ').map(String::from).collect(),
            spans.iter().map(|&(s, e, t)| EntitySpan::new(s, e, et(t))).collect(),
        )
        .unwrap()
    }

    fn template() -> PromptTemplate {
        PromptTemplate::generic("hard-disk drives", &BTreeSet::from([et("Component"), et("Function")]))
    }

    #[test]
    fn example_rendering() {
        let s = sent(0, "the GMR head", &[(1, 3, "Component")]);
        assert_eq!(render_example(&s), "Sentence: the GMR head\nEntities:\nGMR head :: Component");
        assert!(render_example(&sent(0, "nothing here", &[])).ends_with("NONE"));
        let two = sent(0, "a b c", &[(2, 3, "Function"), (0, 1, "Component")]);
        assert_eq!(render_example(&two), "Sentence: a b c\nEntities:\na :: Component\nc :: Function");
    }

    #[test]
    fn zero_shot_has_three_blocks() {
        let p = build_prompt(&template(), &[], &sent(0, "the head", &[]));
        assert!(!p.text.contains("Examples:"));
        assert_eq!(p.text.matches("Sentence:").count(), 1);
        assert!(p.text.ends_with("Sentence: the head\nEntities:"));
        assert!(p.example_ids.is_empty());
    }

    #[test]
    fn block_order_and_labels() {
        let tmpl = template();
        let ex = [sent(4, "a b", &[(0, 1, "Component")]), sent(9, "c d", &[(1, 2, "Function")])];
        let refs: Vec<&TaggedSentence> = ex.iter().collect();
        let p = build_prompt(&tmpl, &refs, &sent(0, "x y", &[(0, 1, "Function")]));
        let task = p.text.find("You are an expert").unwrap();
        let types = p.text.find("Entity types:").unwrap();
        let first_example = p.text.find("Examples:").unwrap();
        let input = p.text.find("Input:").unwrap();
        assert!(task < types && types < first_example && first_example < input);
        assert!(p.text.contains("Component") && p.text.contains("Function"));
        assert_eq!(p.example_ids, vec![4, 9]);
        assert!(!p.text.contains("x :: Function"));
        assert_eq!(p.token_estimate, p.text.chars().count().div_ceil(4));
        assert_eq!(p, build_prompt(&tmpl, &refs, &sent(0, "x y", &[(0, 1, "Function")])));
    }

    #[test]
    fn builtin_templates_parse() {
        for name in PromptTemplate::builtin_names() {
            let t = PromptTemplate::builtin(name).unwrap();
            assert!(!t.entity_types.is_empty());
        }
        assert_eq!(PromptTemplate::builtin("fabner").unwrap().entity_types.len(), 12);
        assert!(PromptTemplate::builtin("nope").is_err());
    }

    #[test]
    fn reconcile_fills_and_rejects() {
        let tmpl = PromptTemplate::builtin("assembly").unwrap();
        let labels = BTreeSet::from([et("PART"), et("OPER"), et("TOOL"), et("QTY"), et("DIR")]);
        let t = tmpl.clone().reconcile(&labels).unwrap();
        assert_eq!(t.label_set(), labels);
        assert_eq!(t.entity_types.last().unwrap().name, et("DIR"));
        assert!(tmpl.reconcile(&BTreeSet::from([et("PART")])).is_err());
    }
}
