//! Prompt templates with `{placeholder}` substitution.
//!
//! A template body may reference `{question}`, `{passages}`, `{candidates}`,
//! `{initial_answer}` and `{shots}`; any other brace is rejected when the
//! template is created. Rendering is a single pass, so braces inside bound
//! values are copied verbatim.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const PLACEHOLDERS: [&str; 5] = ["question", "passages", "candidates", "initial_answer", "shots"];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TemplateError {
    #[error("template `{name}`: unknown placeholder `{{{placeholder}}}`")]
    UnknownPlaceholder { name: String, placeholder: String },
    #[error("template `{name}`: unbalanced brace at byte {at}")]
    Unbalanced { name: String, at: usize },
    #[error("template `{0}`: cannot read {1}")]
    Read(String, String),
    #[error("unknown template stage `{0}`")]
    UnknownStage(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shot {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TemplateStage {
    Initial,
    Read,
    Refine,
    CotInitial,
    CotRead,
    CotRefine,
}

impl TemplateStage {
    pub const ALL: [TemplateStage; 6] = [
        TemplateStage::Initial,
        TemplateStage::Read,
        TemplateStage::Refine,
        TemplateStage::CotInitial,
        TemplateStage::CotRead,
        TemplateStage::CotRefine,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateStage::Initial => "initial",
            TemplateStage::Read => "read",
            TemplateStage::Refine => "refine",
            TemplateStage::CotInitial => "cot_initial",
            TemplateStage::CotRead => "cot_read",
            TemplateStage::CotRefine => "cot_refine",
        }
    }

    fn default_body(self) -> &'static str {
        match self {
            TemplateStage::Initial => include_str!("../../templates/initial.txt"),
            TemplateStage::Read => include_str!("../../templates/read.txt"),
            TemplateStage::Refine => include_str!("../../templates/refine.txt"),
            TemplateStage::CotInitial => include_str!("../../templates/cot_initial.txt"),
            TemplateStage::CotRead => include_str!("../../templates/cot_read.txt"),
            TemplateStage::CotRefine => include_str!("../../templates/cot_refine.txt"),
        }
    }
}

impl fmt::Display for TemplateStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TemplateStage {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateStage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| TemplateError::UnknownStage(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Literal(String),
    Slot(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    name: String,
    body: String,
    pieces: Vec<Piece>,
    shots: Vec<Shot>,
}

/// Values bound to placeholders at render time; shots come from the template.
#[derive(Debug, Clone, Copy, Default)]
pub struct Bindings<'a> {
    pub question: &'a str,
    pub passages: &'a str,
    pub candidates: &'a str,
    pub initial_answer: &'a str,
}

impl PromptTemplate {
    pub fn new(name: &str, body: &str) -> Result<Self, TemplateError> {
        let body = body.trim_end().to_string();
        let pieces = parse(name, &body)?;
        Ok(Self {
            name: name.to_string(),
            body,
            pieces,
            shots: Vec::new(),
        })
    }

    pub fn with_shots(mut self, shots: Vec<Shot>) -> Self {
        self.shots = shots;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn shots(&self) -> &[Shot] {
        &self.shots
    }

    pub fn placeholders(&self) -> Vec<&'static str> {
        self.pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Slot(s) => Some(*s),
                Piece::Literal(_) => None,
            })
            .collect()
    }

    pub fn render(&self, b: &Bindings<'_>) -> String {
        let shots = render_shots(&self.shots);
        let mut out = String::with_capacity(self.body.len() + b.passages.len() + 64);
        for piece in &self.pieces {
            match piece {
                Piece::Literal(s) => out.push_str(s),
                Piece::Slot("question") => out.push_str(b.question),
                Piece::Slot("passages") => out.push_str(b.passages),
                Piece::Slot("candidates") => out.push_str(b.candidates),
                Piece::Slot("initial_answer") => out.push_str(b.initial_answer),
                Piece::Slot("shots") => out.push_str(&shots),
                Piece::Slot(other) => unreachable!("unvalidated placeholder {other}"),
            }
        }
        out
    }
}

fn render_shots(shots: &[Shot]) -> String {
    let mut out = String::new();
    for s in shots {
        out.push_str("Question: ");
        out.push_str(&s.question);
        out.push_str("\nAnswer: ");
        out.push_str(&s.answer);
        out.push_str("\n\n");
    }
    out
}

fn parse(name: &str, body: &str) -> Result<Vec<Piece>, TemplateError> {
    let mut pieces = Vec::new();
    let mut literal = String::new();
    let mut rest = body;
    let mut offset = 0;
    while let Some(pos) = rest.find(['{', '}']) {
        if rest.as_bytes()[pos] == b'}' {
            return Err(TemplateError::Unbalanced {
                name: name.into(),
                at: offset + pos,
            });
        }
        literal.push_str(&rest[..pos]);
        let after = &rest[pos + 1..];
        let close = after.find('}').ok_or(TemplateError::Unbalanced {
            name: name.into(),
            at: offset + pos,
        })?;
        let key = &after[..close];
        let slot = PLACEHOLDERS
            .iter()
            .find(|p| **p == key)
            .ok_or_else(|| TemplateError::UnknownPlaceholder {
                name: name.into(),
                placeholder: key.into(),
            })?;
        if !literal.is_empty() {
            pieces.push(Piece::Literal(std::mem::take(&mut literal)));
        }
        pieces.push(Piece::Slot(slot));
        let consumed = pos + 1 + close + 1;
        offset += consumed;
        rest = &rest[consumed..];
    }
    literal.push_str(rest);
    if !literal.is_empty() {
        pieces.push(Piece::Literal(literal));
    }
    Ok(pieces)
}

/// One template per pipeline stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateStage, PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        let templates = TemplateStage::ALL
            .into_iter()
            .map(|st| {
                let t = PromptTemplate::new(st.as_str(), st.default_body())
                    .expect("built-in templates are valid");
                (st, t)
            })
            .collect();
        Self { templates }
    }
}

impl TemplateSet {
    pub fn get(&self, stage: TemplateStage) -> &PromptTemplate {
        &self.templates[&stage]
    }

    pub fn set(&mut self, stage: TemplateStage, template: PromptTemplate) {
        self.templates.insert(stage, template);
    }

    pub fn load_override(&mut self, stage: TemplateStage, path: &Path) -> Result<(), TemplateError> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| TemplateError::Read(stage.to_string(), format!("{}: {e}", path.display())))?;
        let shots = self.get(stage).shots().to_vec();
        self.set(stage, PromptTemplate::new(stage.as_str(), &body)?.with_shots(shots));
        Ok(())
    }

    /// Attach the same demonstrations to every stage.
    pub fn with_shots(mut self, shots: &[Shot]) -> Self {
        for t in self.templates.values_mut() {
            t.shots = shots.to_vec();
        }
        self
    }

    pub fn iter(&self) -> impl Iterator<Item = (TemplateStage, &PromptTemplate)> {
        self.templates.iter().map(|(s, t)| (*s, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_all_placeholders() {
        let t = PromptTemplate::new(
            "t",
            "{shots}Q: {question}\n{passages}\n{candidates}\nfirst={initial_answer}",
        )
        .unwrap()
        .with_shots(vec![Shot {
            question: "q0".into(),
            answer: "a0".into(),
        }]);
        let out = t.render(&Bindings {
            question: "who?",
            passages: "P",
            candidates: "C",
            initial_answer: "I",
        });
        assert_eq!(out, "Question: q0\nAnswer: a0\n\nQ: who?\nP\nC\nfirst=I");
        assert!(!out.contains('{') && !out.contains('}'));
    }

    #[test]
    fn rejects_unknown_and_unbalanced() {
        assert!(matches!(
            PromptTemplate::new("t", "{nope}"),
            Err(TemplateError::UnknownPlaceholder { .. })
        ));
        assert!(matches!(
            PromptTemplate::new("t", "x {question"),
            Err(TemplateError::Unbalanced { .. })
        ));
        assert!(matches!(
            PromptTemplate::new("t", "x } y"),
            Err(TemplateError::Unbalanced { .. })
        ));
    }

    #[test]
    fn bound_values_are_not_reinterpreted() {
        let t = PromptTemplate::new("t", "{question}|{passages}").unwrap();
        let out = t.render(&Bindings {
            question: "{passages}",
            passages: "x",
            ..Bindings::default()
        });
        assert_eq!(out, "{passages}|x");
    }

    #[test]
    fn builtin_set_is_complete() {
        let set = TemplateSet::default();
        for st in TemplateStage::ALL {
            let t = set.get(st);
            assert!(t.placeholders().contains(&"question"), "{st}");
            assert!(!t.body().ends_with('\n'));
        }
        assert!(set.get(TemplateStage::Refine).placeholders().contains(&"candidates"));
        assert!(!set.get(TemplateStage::Initial).placeholders().contains(&"passages"));
        assert_eq!("cot_refine".parse::<TemplateStage>().unwrap(), TemplateStage::CotRefine);
    }

    #[test]
    fn zero_shot_renders_no_demonstrations() {
        let set = TemplateSet::default();
        let out = set.get(TemplateStage::Initial).render(&Bindings {
            question: "q",
            ..Bindings::default()
        });
        assert!(out.starts_with("Answer the following question"));
        let few = TemplateSet::default().with_shots(&[Shot {
            question: "x".into(),
            answer: "y".into(),
        }]);
        let out = few.get(TemplateStage::Refine).render(&Bindings::default());
        assert!(out.starts_with("Question: x\nAnswer: y\n\n"));
    }
}
