//! Prompt rendering, target serialization, and output parsing.
//!
//! The scaffold lives in `assets/prompt_template_v1.txt` and is substituted
//! byte-for-byte, so rendered prompts are stable across runs and releases.
//! Generated text is parsed with total parsers: any string yields a
//! prediction, malformed lines are tallied rather than raised.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Scaffold for document-grounded prompts, `{instruction}` substituted.
pub const PROMPT_TEMPLATE: &str = include_str!("../assets/prompt_template_v1.txt");

/// The sentence that announces the document-feature prefix; instruction-only
/// samples drop it.
const DOC_PREAMBLE: &str = "The previous information is about document images.\n";

/// Grammar revision for serialized extraction targets. Bump when the
/// separators change so stored corpora and parsers stay in step.
pub const TARGET_GRAMMAR_VERSION: u32 = 1;

/// Separator between entity text and label; entity text may itself contain
/// commas, so parsing splits on the last occurrence.
const PAIR_SEP: &str = ", ";
const ENTITY_SEP: char = '\n';

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("render_prompt: {field} must not be empty")]
    EmptyField { field: &'static str },
    #[error("extraction target: entity {index} has empty text")]
    EmptyEntityText { index: usize },
    #[error("extraction target: entity {index} text contains a newline")]
    EntityTextNewline { index: usize },
    #[error("extraction target: entity {index} label {label:?} contains a separator")]
    BadLabel { index: usize, label: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Extraction,
    DocQa,
    NlpInstruction,
}

impl TaskKind {
    pub fn is_vrdu(self) -> bool {
        self != TaskKind::NlpInstruction
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Extraction => "extraction",
            TaskKind::DocQa => "doc_qa",
            TaskKind::NlpInstruction => "nlp_instruction",
        }
    }
}

/// Task-specific ingredients for the `{instruction}` slot.
#[derive(Debug, Clone)]
pub enum TaskFields<'a> {
    Classification { labels: &'a [String] },
    Extraction { labels: &'a [String] },
    DocQa { question: &'a str },
    Nlp { instruction: &'a str, input: Option<&'a str> },
}

impl TaskFields<'_> {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskFields::Classification { .. } => TaskKind::Classification,
            TaskFields::Extraction { .. } => TaskKind::Extraction,
            TaskFields::DocQa { .. } => TaskKind::DocQa,
            TaskFields::Nlp { .. } => TaskKind::NlpInstruction,
        }
    }
}

/// Builds the instruction sentence for a task.
pub fn instruction_text(fields: &TaskFields) -> Result<String, PromptError> {
    match fields {
        TaskFields::Classification { labels } => {
            if labels.is_empty() {
                return Err(PromptError::EmptyField { field: "labels" });
            }
            Ok(format!(
                "Perform document classification. The classification labels are {}.",
                labels.join(", ")
            ))
        }
        TaskFields::Extraction { labels } => {
            if labels.is_empty() {
                return Err(PromptError::EmptyField { field: "labels" });
            }
            Ok(format!(
                "Perform document information extraction. The classification labels are {}. \
                 The output format is a set of extraction words and their labels, separated by \
                 commas. If multiple extraction targets exist, use \\n as a separator and split \
                 the outputs.",
                labels.join(", ")
            ))
        }
        TaskFields::DocQa { question } => {
            if question.is_empty() {
                return Err(PromptError::EmptyField { field: "question" });
            }
            Ok(format!(
                "Perform document question answering. The question is that {question}"
            ))
        }
        TaskFields::Nlp { instruction, input } => {
            if instruction.is_empty() {
                return Err(PromptError::EmptyField { field: "instruction" });
            }
            Ok(match input.filter(|i| !i.is_empty()) {
                Some(input) => format!("{instruction}\n\n{input}"),
                None => (*instruction).to_string(),
            })
        }
    }
}

/// Wraps an already-built instruction in the scaffold. Document tasks keep the
/// preamble sentence; instruction-only tasks drop it.
pub fn wrap_instruction(kind: TaskKind, instruction: &str) -> String {
    let template = if kind.is_vrdu() {
        PROMPT_TEMPLATE
    } else {
        PROMPT_TEMPLATE
            .strip_prefix(DOC_PREAMBLE)
            .expect("template starts with the document preamble")
    };
    template.replace("{instruction}", instruction)
}

/// Full prompt for a task: instruction built from `fields`, then wrapped.
pub fn render_prompt(fields: &TaskFields) -> Result<String, PromptError> {
    Ok(wrap_instruction(fields.kind(), &instruction_text(fields)?))
}

/// One rendered sample: instruction and serialized target, plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSample {
    pub kind: TaskKind,
    /// Index into the corpus documents; absent for instruction-only samples.
    pub doc_index: Option<usize>,
    pub instruction: String,
    pub target: String,
    pub dataset: String,
    pub record_id: String,
}

impl TaskSample {
    /// The full decoder prompt string for this sample.
    pub fn prompt(&self) -> String {
        wrap_instruction(self.kind, &self.instruction)
    }
}

/// Parsed extraction output. Only pairs whose label is in the task's label set
/// survive; everything else bumps `malformed_lines`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExtractionPrediction {
    pub pairs: Vec<(String, String)>,
    pub malformed_lines: usize,
}

/// Renders entities as `text, label` lines in annotation order.
pub fn serialize_extraction_target(
    entities: &[(String, String)],
) -> Result<String, PromptError> {
    let mut lines = Vec::with_capacity(entities.len());
    for (index, (text, label)) in entities.iter().enumerate() {
        if text.is_empty() {
            return Err(PromptError::EmptyEntityText { index });
        }
        if text.contains(ENTITY_SEP) {
            return Err(PromptError::EntityTextNewline { index });
        }
        if label.is_empty() || label.contains(ENTITY_SEP) || label.contains(',') {
            return Err(PromptError::BadLabel {
                index,
                label: label.clone(),
            });
        }
        lines.push(format!("{text}{PAIR_SEP}{label}"));
    }
    Ok(lines.join(&ENTITY_SEP.to_string()))
}

/// Total parser for generated extraction output: split on newlines, then on
/// the last `", "` in each line so entity text may contain commas. Lines that
/// do not parse or whose label is unknown are dropped and tallied.
pub fn parse_extraction_output(s: &str, label_set: &[String]) -> ExtractionPrediction {
    let mut out = ExtractionPrediction::default();
    for line in s.split(ENTITY_SEP) {
        if line.is_empty() {
            continue;
        }
        match line.rsplit_once(PAIR_SEP) {
            Some((text, label)) if !text.is_empty() && label_set.iter().any(|l| l == label) => {
                out.pairs.push((text.to_string(), label.to_string()));
            }
            _ => out.malformed_lines += 1,
        }
    }
    out
}

/// Exact-match classification parse after whitespace trimming; anything else
/// is a reject (`None`), scored as incorrect.
pub fn parse_classification_output(s: &str, label_set: &[String]) -> Option<String> {
    let trimmed = s.trim();
    label_set.iter().find(|l| l.as_str() == trimmed).cloned()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(ls: &[&str]) -> Vec<String> {
        ls.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn classification_prompt_contains_task_instruction() {
        let ls = labels(&["letter", "invoice"]);
        let p = render_prompt(&TaskFields::Classification { labels: &ls }).unwrap();
        assert!(p.contains(
            "Perform document classification. The classification labels are letter, invoice."
        ));
        assert!(p.starts_with("The previous information is about document images.\n"));
    }

    #[test]
    fn docqa_prompt_uses_the_question_phrase() {
        let p = render_prompt(&TaskFields::DocQa {
            question: "What is the date?",
        })
        .unwrap();
        assert!(p.contains(
            "Perform document question answering. The question is that What is the date?"
        ));
    }

    #[test]
    fn scaffold_markers_always_present() {
        let ls = labels(&["a"]);
        for fields in [
            TaskFields::Classification { labels: &ls },
            TaskFields::Extraction { labels: &ls },
            TaskFields::DocQa { question: "Q?" },
            TaskFields::Nlp { instruction: "Do it.", input: None },
        ] {
            let p = render_prompt(&fields).unwrap();
            assert!(p.contains("Below is an instruction that describes a task."));
            assert!(p.contains("### Instruction:"));
            assert!(p.contains("### Response:"));
        }
    }

    #[test]
    fn nlp_prompt_drops_the_document_preamble() {
        let p = render_prompt(&TaskFields::Nlp {
            instruction: "Add 2 and 3.",
            input: None,
        })
        .unwrap();
        assert!(p.starts_with("Below is an instruction that describes a task."));
        assert!(!p.contains("document images"));
    }

    #[test]
    fn rendering_is_byte_stable() {
        let ls = labels(&["x", "y"]);
        let f = TaskFields::Classification { labels: &ls };
        assert_eq!(
            render_prompt(&f).unwrap().into_bytes(),
            render_prompt(&f).unwrap().into_bytes()
        );
    }

    #[test]
    fn missing_fields_are_validation_errors() {
        assert_eq!(
            render_prompt(&TaskFields::Classification { labels: &[] }).unwrap_err(),
            PromptError::EmptyField { field: "labels" }
        );
        assert_eq!(
            render_prompt(&TaskFields::DocQa { question: "" }).unwrap_err(),
            PromptError::EmptyField { field: "question" }
        );
    }

    fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items.iter().map(|(t, l)| (t.to_string(), l.to_string())).collect()
    }

    #[test]
    fn serialize_fixtures() {
        assert_eq!(
            serialize_extraction_target(&pairs(&[("TOTAL", "total")])).unwrap(),
            "TOTAL, total"
        );
        assert_eq!(
            serialize_extraction_target(&pairs(&[
                ("ACME", "company"),
                ("2019-05-01", "date")
            ]))
            .unwrap(),
            "ACME, company\n2019-05-01, date"
        );
        assert_eq!(serialize_extraction_target(&[]).unwrap(), "");
    }

    #[test]
    fn serialize_rejects_bad_entities() {
        assert_eq!(
            serialize_extraction_target(&pairs(&[("", "total")])).unwrap_err(),
            PromptError::EmptyEntityText { index: 0 }
        );
        assert_eq!(
            serialize_extraction_target(&pairs(&[("a\nb", "total")])).unwrap_err(),
            PromptError::EntityTextNewline { index: 0 }
        );
        assert!(matches!(
            serialize_extraction_target(&pairs(&[("a", "to,tal")])).unwrap_err(),
            PromptError::BadLabel { index: 0, .. }
        ));
    }

    #[test]
    fn parse_fixtures() {
        let ls = labels(&["company", "date", "total"]);
        let p = parse_extraction_output("ACME, company\n2019-05-01, date", &ls);
        assert_eq!(p.pairs, pairs(&[("ACME", "company"), ("2019-05-01", "date")]));
        assert_eq!(p.malformed_lines, 0);

        let p = parse_extraction_output("garbage line", &ls);
        assert!(p.pairs.is_empty());
        assert_eq!(p.malformed_lines, 1);

        // comma inside the entity text: split on the last separator
        let p = parse_extraction_output("1,000.00, total", &ls);
        assert_eq!(p.pairs, pairs(&[("1,000.00", "total")]));

        // unknown label is dropped and tallied
        let p = parse_extraction_output("ACME, brand", &ls);
        assert!(p.pairs.is_empty());
        assert_eq!(p.malformed_lines, 1);

        // trailing newline from generation is not malformed
        let p = parse_extraction_output("ACME, company\n", &ls);
        assert_eq!(p.pairs.len(), 1);
        assert_eq!(p.malformed_lines, 0);
    }

    #[test]
    fn classification_parse_fixtures() {
        let ls = labels(&["invoice", "letter"]);
        assert_eq!(
            parse_classification_output(" invoice\n", &ls),
            Some("invoice".to_string())
        );
        assert_eq!(parse_classification_output("Invoice", &ls), None);
        assert_eq!(parse_classification_output("", &ls), None);
    }

    #[test]
    fn roundtrip_examples() {
        let ls = labels(&["company", "total"]);
        for ents in [
            pairs(&[("TOTAL", "total")]),
            pairs(&[("a, b, c", "company"), ("1,000.00", "total")]),
            pairs(&[("x", "total"), ("x", "total")]),
        ] {
            let s = serialize_extraction_target(&ents).unwrap();
            let back = parse_extraction_output(&s, &ls);
            assert_eq!(back.pairs, ents);
            assert_eq!(back.malformed_lines, 0);
        }
    }
}
