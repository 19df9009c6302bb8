//! Line-delimited JSON corpus loaders.
//!
//! One neutral schema per dataset family (see `docs/formats.md`). A file that
//! fails to parse as JSON lines is fatal; a record that parses but violates
//! the schema is rejected individually with its record id.

use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::{Annotations, DataError, Document, GrayImage, QaPair, Word};
use crate::prompts::{self, TaskFields, TaskKind, TaskSample};

#[derive(Debug, Clone, PartialEq)]
pub struct RecordReject {
    pub record: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub docs: Vec<Document>,
    pub rejects: Vec<RecordReject>,
}

/// CORD-style labels come as `group.field`; the coarse view keeps the group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelGranularity {
    #[default]
    Fine,
    Coarse,
}

#[derive(Deserialize)]
struct RawImage {
    h: usize,
    w: usize,
    /// Row-major intensities 0..=255.
    gray: Vec<u16>,
}

#[derive(Deserialize)]
struct RawEntity {
    text: String,
    label: String,
}

#[derive(Deserialize)]
struct RawQa {
    question: String,
    answers: Vec<String>,
}

#[derive(Deserialize)]
struct RawDoc {
    id: Option<String>,
    page_size: Option<(f64, f64)>,
    words: Vec<String>,
    boxes: Vec<[f64; 4]>,
    image: Option<RawImage>,
    label: Option<String>,
    entities: Option<Vec<RawEntity>>,
    qas: Option<Vec<RawQa>>,
}

fn parse_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>, DataError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: T = serde_json::from_str(line).map_err(|e| DataError::Json {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push((i + 1, v));
    }
    Ok(out)
}

/// Newlines inside entity or answer text never survive loading; targets are
/// single-line by grammar.
fn flatten(text: &str) -> String {
    text.replace(['\n', '\r'], " ")
}

fn build_document(line: usize, raw: RawDoc, require: Option<TaskKind>) -> Result<Document, String> {
    let id = raw.id.unwrap_or_else(|| format!("line{line}"));
    let page_size = raw.page_size.unwrap_or((1000.0, 1000.0));
    if raw.words.len() != raw.boxes.len() {
        return Err(format!(
            "{} words but {} boxes",
            raw.words.len(),
            raw.boxes.len()
        ));
    }
    let words = raw
        .words
        .into_iter()
        .zip(raw.boxes)
        .map(|(text, box_px)| Word { text, box_px })
        .collect();
    let image = match raw.image {
        None => None,
        Some(img) => {
            if img.gray.len() != img.h * img.w {
                return Err(format!(
                    "image has {} pixels, expected {}x{}",
                    img.gray.len(),
                    img.h,
                    img.w
                ));
            }
            Some(GrayImage {
                h: img.h,
                w: img.w,
                pixels: img.gray.iter().map(|&v| f64::from(v.min(255)) / 255.0).collect(),
            })
        }
    };
    let annotations = Annotations {
        label: raw.label,
        entities: raw
            .entities
            .unwrap_or_default()
            .into_iter()
            .map(|e| (flatten(&e.text), e.label))
            .collect(),
        qas: raw
            .qas
            .unwrap_or_default()
            .into_iter()
            .map(|q| QaPair {
                question: flatten(&q.question),
                answers: q.answers.iter().map(|a| flatten(a)).collect(),
            })
            .collect(),
    };
    let doc = Document {
        id,
        page_size,
        words,
        image,
        annotations,
    };
    doc.validate()?;
    match require {
        Some(TaskKind::Classification) if doc.annotations.label.is_none() => {
            return Err("missing classification label".into())
        }
        Some(TaskKind::DocQa) if doc.annotations.qas.is_empty() => {
            return Err("missing qa annotations".into())
        }
        _ => {}
    }
    Ok(doc)
}

fn load_documents(path: &Path, require: Option<TaskKind>) -> Result<LoadReport, DataError> {
    let mut report = LoadReport::default();
    for (line, raw) in parse_lines::<RawDoc>(path)? {
        let fallback_id = raw.id.clone().unwrap_or_else(|| format!("line{line}"));
        match build_document(line, raw, require) {
            Ok(doc) => report.docs.push(doc),
            Err(reason) => report.rejects.push(RecordReject {
                record: fallback_id,
                reason,
            }),
        }
    }
    Ok(report)
}

/// Loads documents without requiring any particular annotation; used for
/// single-document prediction and the question loop.
pub fn load_document_file(path: impl AsRef<Path>) -> Result<LoadReport, DataError> {
    load_documents(path.as_ref(), None)
}

/// Form-understanding records: words, boxes, and semantic entities.
pub fn load_funsd_like(path: impl AsRef<Path>) -> Result<LoadReport, DataError> {
    load_documents(path.as_ref(), Some(TaskKind::Extraction))
}

/// Receipt records share the extraction schema; `granularity` optionally
/// collapses `group.field` labels to their group.
pub fn load_cord_like(
    path: impl AsRef<Path>,
    granularity: LabelGranularity,
) -> Result<LoadReport, DataError> {
    let mut report = load_documents(path.as_ref(), Some(TaskKind::Extraction))?;
    if granularity == LabelGranularity::Coarse {
        for doc in &mut report.docs {
            for (_, label) in &mut doc.annotations.entities {
                if let Some((group, _)) = label.split_once('.') {
                    *label = group.to_string();
                }
            }
        }
    }
    Ok(report)
}

/// Document-classification records: words, boxes, and a category label.
pub fn load_rvlcdip_like(path: impl AsRef<Path>) -> Result<LoadReport, DataError> {
    load_documents(path.as_ref(), Some(TaskKind::Classification))
}

/// Question-answering records: words, boxes, and QA pairs with gold answers.
pub fn load_docvqa_like(path: impl AsRef<Path>) -> Result<LoadReport, DataError> {
    load_documents(path.as_ref(), Some(TaskKind::DocQa))
}

#[derive(Deserialize)]
struct RawInstruction {
    instruction: String,
    input: Option<String>,
    output: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct InstructionLoad {
    pub samples: Vec<TaskSample>,
    pub rejects: Vec<RecordReject>,
}

/// Instruction-tuning records: instruction, optional input, output.
pub fn load_alpaca_like(path: impl AsRef<Path>) -> Result<InstructionLoad, DataError> {
    let path = path.as_ref();
    let dataset = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "instructions".into());
    let mut out = InstructionLoad::default();
    for (line, raw) in parse_lines::<RawInstruction>(path)? {
        let record = format!("line{line}");
        let output = raw.output.unwrap_or_default();
        if output.is_empty() {
            out.rejects.push(RecordReject {
                record,
                reason: "missing or empty output".into(),
            });
            continue;
        }
        let instruction = match prompts::instruction_text(&TaskFields::Nlp {
            instruction: &raw.instruction,
            input: raw.input.as_deref(),
        }) {
            Ok(i) => i,
            Err(e) => {
                out.rejects.push(RecordReject {
                    record,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        out.samples.push(TaskSample {
            kind: TaskKind::NlpInstruction,
            doc_index: None,
            instruction,
            target: output,
            dataset: dataset.clone(),
            record_id: record,
        });
    }
    Ok(out)
}
