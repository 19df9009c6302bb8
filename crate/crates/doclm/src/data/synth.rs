//! Deterministic synthetic miniature documents.
//!
//! Each document carries its class signal twice: a class-specific keyword
//! (text channel) placed at a class-specific grid cell (layout and vision
//! channels). Distractor words never enter the reserved class cells, so a
//! vision-only model can still separate the classes, and a trivial
//! keyword-scan oracle classifies the corpus perfectly.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{render_boxes, Annotations, DataError, Document, QaPair, Word};

/// Category vocabulary; a run uses the first `n_classes` entries of the
/// configured label set.
pub const CLASS_LABELS: [&str; 16] = [
    "letter",
    "form",
    "email",
    "handwritten",
    "advertisement",
    "report",
    "publication",
    "specification",
    "folder",
    "news",
    "budget",
    "invoice",
    "presentation",
    "questionnaire",
    "resume",
    "memo",
];

/// Marker word per class index, disjoint from every other vocabulary here so
/// the keyword oracle is unambiguous.
const CLASS_KEYWORDS: [&str; 16] = [
    "zephyr", "quartz", "marble", "velvet", "cobalt", "amber", "juniper", "falcon", "harbor",
    "meadow", "copper", "bristle", "lantern", "orchid", "pebble", "saffron",
];

pub const ENTITY_LABELS: [&str; 3] = ["company", "date", "total"];

const COMPANIES: [&str; 8] = [
    "acme", "globex", "initech", "umbrella", "stark", "wayne", "hooli", "vandelay",
];

const DISTRACTORS: [&str; 12] = [
    "lorem", "ipsum", "dolor", "amet", "elit", "tempor", "labore", "magna", "aliqua", "minim",
    "veniam", "nostrud",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_docs: usize,
    pub n_classes: usize,
    pub seed: u64,
    /// Layout grid side (cells per page edge); must be a multiple of 4 so
    /// class anchors tile distinct image patches.
    pub grid: usize,
    pub page_size: (f64, f64),
    /// Rendered grayscale side in pixels.
    pub image_size: usize,
    pub n_distractors: usize,
    /// Global index of the first document; lets a held-out split continue the
    /// same deterministic stream.
    pub start_index: usize,
    pub class_labels: Vec<String>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_docs: 32,
            n_classes: 4,
            seed: 7,
            grid: 8,
            page_size: (640.0, 800.0),
            image_size: 32,
            n_distractors: 6,
            start_index: 0,
            class_labels: CLASS_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl SyntheticSpec {
    pub fn active_labels(&self) -> Vec<String> {
        self.class_labels[..self.n_classes].to_vec()
    }
}

/// Anchor cell (row, col) for a class: classes map onto distinct blocks of a
/// 4x4 block grid.
fn class_anchor(class: usize, grid: usize) -> (usize, usize) {
    let block = grid / 4;
    ((class / 4) * block, (class % 4) * block)
}

/// Every cell inside the anchored block of an active class is reserved.
fn reserved_cells(n_classes: usize, grid: usize) -> Vec<(usize, usize)> {
    let block = grid / 4;
    let mut cells = Vec::new();
    for c in 0..n_classes {
        let (r0, c0) = class_anchor(c, grid);
        for r in r0..r0 + block {
            for col in c0..c0 + block {
                cells.push((r, col));
            }
        }
    }
    cells
}

fn cell_box(cell: (usize, usize), grid: usize, page: (f64, f64), rng: &mut ChaCha8Rng) -> [f64; 4] {
    let (w, h) = page;
    let cw = w / grid as f64;
    let ch = h / grid as f64;
    let jx = rng.gen_range(0.0..cw * 0.1);
    let jy = rng.gen_range(0.0..ch * 0.1);
    let x0 = cell.1 as f64 * cw + jx;
    let y0 = cell.0 as f64 * ch + jy;
    [x0, y0, (x0 + cw * 0.8).min(w), (y0 + ch * 0.8).min(h)]
}

/// Generates `spec.n_docs` documents. The seed fully determines the output;
/// each document draws from its own stream keyed by (seed, global index).
pub fn synth_generate(spec: &SyntheticSpec) -> Result<Vec<Document>, DataError> {
    if spec.n_classes > spec.class_labels.len() || spec.n_classes > CLASS_KEYWORDS.len() {
        return Err(DataError::TooManyClasses(
            spec.n_classes,
            spec.class_labels.len().min(CLASS_KEYWORDS.len()),
        ));
    }
    assert!(
        spec.grid >= 4 && spec.grid % 4 == 0,
        "layout grid must be a positive multiple of 4"
    );
    assert!(spec.n_classes > 0, "need at least one class");

    let reserved = reserved_cells(spec.n_classes, spec.grid);
    let free: Vec<(usize, usize)> = (0..spec.grid)
        .flat_map(|r| (0..spec.grid).map(move |c| (r, c)))
        .filter(|cell| !reserved.contains(cell))
        .collect();

    let mut docs = Vec::with_capacity(spec.n_docs);
    for i in 0..spec.n_docs {
        let global = spec.start_index + i;
        let mut rng = ChaCha8Rng::seed_from_u64(
            spec.seed ^ (global as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let class = global % spec.n_classes;
        let label = spec.class_labels[class].clone();

        // entity values for this document
        let company = COMPANIES[rng.gen_range(0..COMPANIES.len())].to_string();
        let total = format!("${}.{:02}", rng.gen_range(1..100), rng.gen_range(0..100));
        let date = format!(
            "2024-{:02}-{:02}",
            rng.gen_range(1..13),
            rng.gen_range(1..29)
        );
        let mut entity_words: Vec<(String, String)> = vec![
            (company.clone(), "company".to_string()),
            (total.clone(), "total".to_string()),
        ];
        if global % 2 == 1 {
            entity_words.push((date.clone(), "date".to_string()));
        }

        let n_words = entity_words.len() + spec.n_distractors.min(free.len().saturating_sub(entity_words.len()));
        let mut cells = free.clone();
        cells.shuffle(&mut rng);
        cells.truncate(n_words);

        // keyword first, then entities, then distractors fill the rest
        let mut placed: Vec<((usize, usize), String, Option<String>)> = Vec::new();
        placed.push((
            class_anchor(class, spec.grid),
            CLASS_KEYWORDS[class].to_string(),
            None,
        ));
        for (idx, (text, elabel)) in entity_words.iter().enumerate() {
            placed.push((cells[idx], text.clone(), Some(elabel.clone())));
        }
        for cell in cells.iter().skip(entity_words.len()) {
            placed.push((
                *cell,
                DISTRACTORS[rng.gen_range(0..DISTRACTORS.len())].to_string(),
                None,
            ));
        }
        placed.sort_by_key(|(cell, _, _)| *cell);

        let words: Vec<Word> = placed
            .iter()
            .map(|(cell, text, _)| Word {
                text: text.clone(),
                box_px: cell_box(*cell, spec.grid, spec.page_size, &mut rng),
            })
            .collect();
        let entities: Vec<(String, String)> = placed
            .iter()
            .filter_map(|(_, text, l)| l.as_ref().map(|l| (text.clone(), l.clone())))
            .collect();

        // one QA pair per document, cycling through the entity labels
        let (q_text, q_label) = &entities[global % entities.len()];
        let qas = vec![QaPair {
            question: format!("What is the {q_label}?"),
            answers: vec![q_text.clone()],
        }];

        let mut doc = Document {
            id: format!("synth-{global:05}"),
            page_size: spec.page_size,
            words,
            image: None,
            annotations: Annotations {
                label: Some(label),
                entities,
                qas,
            },
        };
        doc.image = Some(render_boxes(&doc, spec.image_size));
        debug_assert!(doc.validate().is_ok());
        docs.push(doc);
    }
    Ok(docs)
}

/// Scans for class keywords; the corpus is built so this is always right.
pub fn keyword_oracle(doc: &Document, n_classes: usize, labels: &[String]) -> Option<String> {
    for word in &doc.words {
        if let Some(c) = CLASS_KEYWORDS[..n_classes]
            .iter()
            .position(|k| *k == word.text)
        {
            return Some(labels[c].clone());
        }
    }
    None
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthManifest {
    pub version: u32,
    pub seed: u64,
    pub n_docs: usize,
    pub n_classes: usize,
    pub start_index: usize,
    pub class_labels: Vec<String>,
    pub entity_labels: Vec<String>,
    pub per_class: BTreeMap<String, usize>,
    #[serde(default)]
    pub files: BTreeMap<String, String>,
}

impl SynthManifest {
    pub fn for_corpus(spec: &SyntheticSpec, docs: &[Document]) -> Self {
        let mut per_class = BTreeMap::new();
        for d in docs {
            if let Some(l) = &d.annotations.label {
                *per_class.entry(l.clone()).or_insert(0) += 1;
            }
        }
        SynthManifest {
            version: 1,
            seed: spec.seed,
            n_docs: spec.n_docs,
            n_classes: spec.n_classes,
            start_index: spec.start_index,
            class_labels: spec.active_labels(),
            entity_labels: ENTITY_LABELS.iter().map(|s| s.to_string()).collect(),
            per_class,
            files: BTreeMap::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_bit_identical_corpora() {
        let spec = SyntheticSpec {
            n_docs: 8,
            ..SyntheticSpec::default()
        };
        let a = synth_generate(&spec).unwrap();
        let b = synth_generate(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn class_assignment_is_balanced() {
        let spec = SyntheticSpec::default(); // 32 docs, 4 classes
        let docs = synth_generate(&spec).unwrap();
        let manifest = SynthManifest::for_corpus(&spec, &docs);
        assert_eq!(manifest.per_class.len(), 4);
        for (_, n) in manifest.per_class {
            assert_eq!(n, 8);
        }
    }

    #[test]
    fn generated_boxes_normalize_in_range() {
        let docs = synth_generate(&SyntheticSpec {
            n_docs: 6,
            ..SyntheticSpec::default()
        })
        .unwrap();
        for d in &docs {
            d.validate().unwrap();
            for w in &d.words {
                let n = super::super::normalize_box(w.box_px, d.page_size).unwrap();
                assert!(n.iter().all(|&v| v <= 1000));
            }
        }
    }

    #[test]
    fn keyword_oracle_is_perfect() {
        let spec = SyntheticSpec {
            n_docs: 24,
            n_classes: 6,
            seed: 123,
            ..SyntheticSpec::default()
        };
        let docs = synth_generate(&spec).unwrap();
        let labels = spec.active_labels();
        for d in &docs {
            assert_eq!(
                keyword_oracle(d, spec.n_classes, &labels).as_ref(),
                d.annotations.label.as_ref()
            );
        }
    }

    #[test]
    fn distractors_stay_out_of_reserved_cells() {
        let spec = SyntheticSpec {
            n_docs: 16,
            seed: 5,
            ..SyntheticSpec::default()
        };
        let docs = synth_generate(&spec).unwrap();
        let reserved = reserved_cells(spec.n_classes, spec.grid);
        let (w, h) = spec.page_size;
        let cw = w / spec.grid as f64;
        let ch = h / spec.grid as f64;
        for d in &docs {
            let class = CLASS_LABELS
                .iter()
                .position(|l| Some(*l) == d.annotations.label.as_deref())
                .unwrap();
            let anchor = class_anchor(class, spec.grid);
            for word in &d.words {
                let cell = (
                    (word.box_px[1] / ch).floor() as usize,
                    (word.box_px[0] / cw).floor() as usize,
                );
                if reserved.contains(&cell) {
                    // only the class keyword may sit in reserved territory
                    assert_eq!(cell, anchor, "word {:?} invades a reserved cell", word.text);
                    assert_eq!(word.text, CLASS_KEYWORDS[class]);
                }
            }
        }
    }

    #[test]
    fn holdout_continues_the_class_rotation() {
        let train = SyntheticSpec {
            n_docs: 8,
            ..SyntheticSpec::default()
        };
        let holdout = SyntheticSpec {
            n_docs: 4,
            start_index: 8,
            ..SyntheticSpec::default()
        };
        let t = synth_generate(&train).unwrap();
        let h = synth_generate(&holdout).unwrap();
        assert_eq!(t.len(), 8);
        assert_eq!(h.len(), 4);
        // streams are disjoint by id and stay balanced
        assert!(h.iter().all(|d| t.iter().all(|td| td.id != d.id)));
        let manifest = SynthManifest::for_corpus(&holdout, &h);
        for (_, n) in manifest.per_class {
            assert_eq!(n, 1);
        }
    }

    #[test]
    fn too_many_classes_is_an_error() {
        let spec = SyntheticSpec {
            n_classes: 17,
            ..SyntheticSpec::default()
        };
        assert!(matches!(
            synth_generate(&spec),
            Err(DataError::TooManyClasses(17, 16))
        ));
    }
}
