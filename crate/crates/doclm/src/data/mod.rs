//! Documents, the byte codec, box normalization, corpus loaders, and the
//! synthetic generator.

mod loader;
mod synth;

pub use loader::{
    load_alpaca_like, load_cord_like, load_document_file, load_docvqa_like, load_funsd_like,
    load_rvlcdip_like, InstructionLoad, LabelGranularity, LoadReport, RecordReject,
};
pub use synth::{keyword_oracle, synth_generate, SynthManifest, SyntheticSpec, CLASS_LABELS, ENTITY_LABELS};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::{self, PromptError, TaskFields, TaskKind, TaskSample};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: invalid JSON: {msg}")]
    Json { line: usize, msg: String },
    #[error("normalize_box: page dimension is zero")]
    ZeroPageDimension,
    #[error("synthetic corpus: {0} classes exceeds the label vocabulary ({1})")]
    TooManyClasses(usize, usize),
    #[error("task kind {0:?} is not derived from documents")]
    UnsupportedKind(TaskKind),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// One OCR word: text plus its raw box in page pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Word {
    pub text: String,
    /// (x0, y0, x1, y1) in page pixels.
    pub box_px: [f64; 4],
}

/// Row-major grayscale raster with values in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrayImage {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn filled(h: usize, w: usize, value: f64) -> Self {
        GrayImage {
            h,
            w,
            pixels: vec![value; h * w],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answers: Vec<String>,
}

/// Task payloads; a document may carry any subset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Annotations {
    pub label: Option<String>,
    pub entities: Vec<(String, String)>,
    pub qas: Vec<QaPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    /// (width, height) in pixels.
    pub page_size: (f64, f64),
    pub words: Vec<Word>,
    /// Absent images are synthesized from the boxes at encode time so the
    /// visual channel is never silently empty.
    pub image: Option<GrayImage>,
    pub annotations: Annotations,
}

impl Document {
    /// Checks the box and QA invariants, returning the first violation.
    pub fn validate(&self) -> Result<(), String> {
        let (w, h) = self.page_size;
        if w <= 0.0 || h <= 0.0 {
            return Err(format!("page_size {:?} is not positive", self.page_size));
        }
        for (i, word) in self.words.iter().enumerate() {
            let [x0, y0, x1, y1] = word.box_px;
            if !(0.0 <= x0 && x0 <= x1 && x1 <= w && 0.0 <= y0 && y0 <= y1 && y1 <= h) {
                return Err(format!("word {i} box {:?} outside page {:?}", word.box_px, self.page_size));
            }
        }
        for (i, qa) in self.annotations.qas.iter().enumerate() {
            if qa.answers.is_empty() {
                return Err(format!("qa {i} has no gold answers"));
            }
        }
        Ok(())
    }

    /// Raster to feed the encoder: the stored image, or one rendered from the
    /// word boxes.
    pub fn raster(&self, size: usize) -> GrayImage {
        match &self.image {
            Some(img) => img.clone(),
            None => render_boxes(self, size),
        }
    }
}

/// Draws word boxes as dark cells on a light page.
pub fn render_boxes(doc: &Document, size: usize) -> GrayImage {
    let mut img = GrayImage::filled(size, size, 0.92);
    let (w, h) = doc.page_size;
    for word in &doc.words {
        let [x0, y0, x1, y1] = word.box_px;
        let px0 = ((x0 / w) * size as f64).floor().max(0.0) as usize;
        let px1 = (((x1 / w) * size as f64).ceil() as usize).min(size);
        let py0 = ((y0 / h) * size as f64).floor().max(0.0) as usize;
        let py1 = (((y1 / h) * size as f64).ceil() as usize).min(size);
        for y in py0..py1 {
            for x in px0..px1 {
                img.pixels[y * size + x] = 0.15;
            }
        }
    }
    img
}

/// Scales a raw pixel box to integer coordinates in [0, 1000].
pub fn normalize_box(box_px: [f64; 4], page_size: (f64, f64)) -> Result<[u16; 4], DataError> {
    let (w, h) = page_size;
    if w <= 0.0 || h <= 0.0 {
        return Err(DataError::ZeroPageDimension);
    }
    let scale = |v: f64, dim: f64| ((v * 1000.0 / dim).floor().clamp(0.0, 1000.0)) as u16;
    Ok([
        scale(box_px[0], w),
        scale(box_px[1], h),
        scale(box_px[2], w),
        scale(box_px[3], h),
    ])
}

/// Byte-level codec shared by the encoder and decoder: ids 0..=255 are raw
/// bytes, followed by the special tokens.
pub struct ByteCodec;

impl ByteCodec {
    pub const BOS: usize = 256;
    pub const EOS: usize = 257;
    pub const PAD: usize = 258;
    pub const VOCAB_SIZE: usize = 259;

    pub fn encode(s: &str) -> Vec<usize> {
        Self::encode_bytes(s.as_bytes())
    }

    pub fn encode_bytes(bytes: &[u8]) -> Vec<usize> {
        bytes.iter().map(|&b| b as usize).collect()
    }

    /// Drops special tokens, keeps raw bytes.
    pub fn decode_bytes(ids: &[usize]) -> Vec<u8> {
        ids.iter()
            .filter(|&&id| id < 256)
            .map(|&id| id as u8)
            .collect()
    }

    /// Lossy UTF-8 view of the decoded bytes (generation is unconstrained).
    pub fn decode(ids: &[usize]) -> String {
        String::from_utf8_lossy(&Self::decode_bytes(ids)).into_owned()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub samples: Vec<TaskSample>,
    pub skipped: usize,
}

/// Sorted unique classification labels present in `docs`.
pub fn derive_class_labels(docs: &[Document]) -> Vec<String> {
    let mut labels: Vec<String> = docs
        .iter()
        .filter_map(|d| d.annotations.label.clone())
        .collect();
    labels.sort();
    labels.dedup();
    labels
}

/// Sorted unique entity labels present in `docs`.
pub fn derive_entity_labels(docs: &[Document]) -> Vec<String> {
    let mut labels: Vec<String> = docs
        .iter()
        .flat_map(|d| d.annotations.entities.iter().map(|(_, l)| l.clone()))
        .collect();
    labels.sort();
    labels.dedup();
    labels
}

/// Renders documents into task samples: one per document for classification
/// and extraction, one per (document, question) for QA. Documents without the
/// needed annotation are skipped and tallied.
pub fn to_task_samples(
    docs: &[Document],
    kind: TaskKind,
    dataset: &str,
    labels: Option<&[String]>,
) -> Result<SampleOutcome, DataError> {
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    let derived;
    let labels: &[String] = match labels {
        Some(l) => l,
        None => {
            derived = match kind {
                TaskKind::Classification => derive_class_labels(docs),
                TaskKind::Extraction => derive_entity_labels(docs),
                _ => Vec::new(),
            };
            &derived
        }
    };
    for (index, doc) in docs.iter().enumerate() {
        match kind {
            TaskKind::Classification => match &doc.annotations.label {
                Some(label) => samples.push(TaskSample {
                    kind,
                    doc_index: Some(index),
                    instruction: prompts::instruction_text(&TaskFields::Classification {
                        labels,
                    })?,
                    target: label.clone(),
                    dataset: dataset.to_string(),
                    record_id: doc.id.clone(),
                }),
                None => skipped += 1,
            },
            TaskKind::Extraction => {
                if doc.annotations.entities.is_empty() {
                    skipped += 1;
                    continue;
                }
                samples.push(TaskSample {
                    kind,
                    doc_index: Some(index),
                    instruction: prompts::instruction_text(&TaskFields::Extraction { labels })?,
                    target: prompts::serialize_extraction_target(&doc.annotations.entities)?,
                    dataset: dataset.to_string(),
                    record_id: doc.id.clone(),
                });
            }
            TaskKind::DocQa => {
                if doc.annotations.qas.is_empty() {
                    skipped += 1;
                    continue;
                }
                for (qi, qa) in doc.annotations.qas.iter().enumerate() {
                    if qa.question.is_empty() || qa.answers.is_empty() {
                        skipped += 1;
                        continue;
                    }
                    samples.push(TaskSample {
                        kind,
                        doc_index: Some(index),
                        instruction: prompts::instruction_text(&TaskFields::DocQa {
                            question: &qa.question,
                        })?,
                        // training target is the first gold answer; evaluation
                        // scores against all of them
                        target: qa.answers[0].clone(),
                        dataset: dataset.to_string(),
                        record_id: format!("{}#q{qi}", doc.id),
                    });
                }
            }
            TaskKind::NlpInstruction => return Err(DataError::UnsupportedKind(kind)),
        }
    }
    Ok(SampleOutcome { samples, skipped })
}
