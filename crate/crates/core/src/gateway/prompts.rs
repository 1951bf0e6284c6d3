//! Prompt templates.
//!
//! Each [`PromptKind`] binds one fixed template with `{name}` slots. The text
//! around the slots is reproduced exactly; slot values are inserted as given.
//! List-valued slots (interpretations) are joined with newlines by
//! [`join_lines`] before rendering.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("{kind:?} prompt: missing slot `{slot}`")]
    MissingSlot { kind: PromptKind, slot: &'static str },
    #[error("{kind:?} prompt: slot `{slot}` must not be empty")]
    EmptySlot { kind: PromptKind, slot: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    DefaultInterp,
    Infill,
    Text2Sql,
    SelfCorrect,
    SynonymRewrite,
    EndToEnd,
}

pub const DB_DUMP: &str = "db_dump";
pub const QUESTION: &str = "question";
pub const INTERPRETATIONS: &str = "interpretations";
pub const SYNONYM: &str = "synonym";
pub const DEMONSTRATIONS: &str = "demonstrations";

/// The sentence the infiller emits when nothing is missing.
pub const SENTINEL: &str = "All interpretations are covered.";

const DEFAULT_INTERP: &str = "\
You are tasked with analyzing questions and providing their possible interpretations. The questions are related to database queries and may be ambiguous or unambiguous.

Your task:
- List every distinct way the question could be understood
- Be thorough and consider all possible meanings
- Explore different ways the question could be interpreted
- Don't limit yourself to obvious interpretations

Important:
- List each interpretation on a separate line
- Do not include explanations or reasoning
- Focus on semantically different interpretations
- Be specific and precise in wording

Given the following database context:
{db_dump}

Provide interpretations for this question:
{question}";

const INFILL: &str = "\
The task is to review the provided context, question, and existing interpretations, and determine if any additional interpretations are missing. If there are missing interpretations, list them on separate lines without explanations. If all interpretations have already been covered, simply state: \"All possible interpretations are covered.\"

Given the following context: {db_dump}

Question: {question}

Existing interpretations: {interpretations}

Provide any missing interpretations or confirm that all possible interpretations are covered.";

const TEXT2SQL: &str = "\
The task is to write SQL queries based on the provided questions in English. Questions can take the form of an instruction or command. Do not include any explanations, and do not select extra columns beyond those requested in the question.

Given the following SQLite database schema: {db_dump}

Answer the following: {question}";

const SELF_CORRECT: &str = "\
The task is to review the provided context, question, and candidate interpretations, and based on this information provide the interpretations that accurately reflect the meaning (or one of the possible meanings) of the question. If any of the candidate interpretations are correct, provide them as a list of interpretations. If there are missing interpretations, provide them as well. Avoid providing interpretations that are incorrect or duplicates. Do not provide any explanations.

Given the following context: {db_dump}

Question: {question}

Candidate interpretations: {interpretations}

Provide the interpretations that accurately reflect the meaning (or one of the possible meanings) of the question.";

const SYNONYM_REWRITE: &str = "\
Your task is to rewrite the question using a given word or phrase.

Examples:
Question: Show titles of songs and names of singers.
Please rewrite using \"stage name\":
Give me titles of songs and stage names of singers.

Question: Show the name of the conductor that has conducted the most number of orchestras.
Please rewrite using \"director\":
List the name of the director who has conducted the most number of orchestras.

Question: Return the id of the document with the fewest paragraphs.
Please rewrite using \"passages\":
What is the id of the document with the fewest passages?

Please provide rewritten question for the following instance. Do not add any explanation or description, output only the rewritten question.

Question:  {question}
Please rewrite using {synonym}";

// Multi-query prompt for the end-to-end baselines. The text-to-SQL
// instruction above is extended with the request to answer every reading.
const END_TO_END: &str = "\
The task is to write SQL queries based on the provided questions in English. Questions can take the form of an instruction or command. If the question is ambiguous and can be understood in more than one way, generate multiple SQL queries, one for each possible interpretation, separated by a blank line. Do not include any explanations, and do not select extra columns beyond those requested in the question.

{demonstrations}Given the following SQLite database schema: {db_dump}

Answer the following: {question}";

impl PromptKind {
    pub fn template(self) -> &'static str {
        match self {
            PromptKind::DefaultInterp => DEFAULT_INTERP,
            PromptKind::Infill => INFILL,
            PromptKind::Text2Sql => TEXT2SQL,
            PromptKind::SelfCorrect => SELF_CORRECT,
            PromptKind::SynonymRewrite => SYNONYM_REWRITE,
            PromptKind::EndToEnd => END_TO_END,
        }
    }

    /// Slots the template uses, in order of first appearance.
    pub fn slots(self) -> &'static [&'static str] {
        match self {
            PromptKind::DefaultInterp | PromptKind::Text2Sql => &[DB_DUMP, QUESTION],
            PromptKind::Infill | PromptKind::SelfCorrect => &[DB_DUMP, QUESTION, INTERPRETATIONS],
            PromptKind::SynonymRewrite => &[QUESTION, SYNONYM],
            PromptKind::EndToEnd => &[DEMONSTRATIONS, DB_DUMP, QUESTION],
        }
    }
}

/// Slots that may be present but empty (an empty schema, no existing
/// interpretations, zero demonstrations).
fn may_be_empty(slot: &str) -> bool {
    matches!(slot, DB_DUMP | INTERPRETATIONS | DEMONSTRATIONS)
}

pub type Slots = BTreeMap<&'static str, String>;

/// Fill `kind`'s template.
pub fn render_prompt(kind: PromptKind, slots: &Slots) -> Result<String, TemplateError> {
    for &slot in kind.slots() {
        match slots.get(slot) {
            None => return Err(TemplateError::MissingSlot { kind, slot }),
            Some(v) if v.trim().is_empty() && !may_be_empty(slot) => {
                return Err(TemplateError::EmptySlot { kind, slot })
            }
            Some(_) => {}
        }
    }

    let template = kind.template();
    let mut out = String::with_capacity(template.len() + slots.values().map(String::len).sum::<usize>());
    let mut rest = template;
    // Single pass so slot values containing `{...}` are never re-expanded.
    while let Some(open) = rest.find('{') {
        let close = open + rest[open..].find('}').expect("template braces are balanced");
        out.push_str(&rest[..open]);
        let name = &rest[open + 1..close];
        out.push_str(&slots[name]);
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Interpretations as they appear in list slots: one per line.
pub fn join_lines<S: AsRef<str>>(items: &[S]) -> String {
    items.iter().map(AsRef::as_ref).collect::<Vec<_>>().join("\n")
}

/// The synonym slot in the demonstrations' format: `"word":`.
pub fn synonym_slot(synonym: &str) -> String {
    format!("\"{synonym}\":")
}
